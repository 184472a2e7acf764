"""Random small-network generator for engine/oracle comparison tests."""

from __future__ import annotations

import numpy as np

from bitquant.tensor_store import ModelFile, Tensor


def random_graph_model(rng: np.random.Generator, max_layers: int = 4) -> tuple[ModelFile, np.ndarray]:
    """A random valid model of at most `max_layers` layers plus one input."""
    tensors: list[Tensor] = []
    lines: list[str] = []
    counter = 0

    def fresh(prefix: str) -> str:
        nonlocal counter
        counter += 1
        return f"{prefix}{counter}"

    if rng.random() < 0.7:
        shape: tuple[int, ...] = (int(rng.integers(1, 4)), int(rng.integers(4, 9)), int(rng.integers(4, 9)))
    else:
        shape = (int(rng.integers(2, 33)),)
    lines.append("input shape=" + "x".join(str(d) for d in shape))

    n_layers = int(rng.integers(1, max_layers + 1))
    for _ in range(n_layers):
        spatial = len(shape) == 3
        if spatial:
            choices = ["conv2d", "batchnorm", "relu", "pool", "flatten"]
        else:
            choices = ["dense", "batchnorm", "relu", "softmax"]
        kind = choices[int(rng.integers(0, len(choices)))]

        if kind == "conv2d":
            c, h, w = shape
            pad = int(rng.integers(0, 2))
            k = int(rng.integers(1, min(3, h + 2 * pad, w + 2 * pad) + 1))
            stride = int(rng.integers(1, 3))
            oc = int(rng.integers(1, 5))
            oh = (h + 2 * pad - k) // stride + 1
            ow = (w + 2 * pad - k) // stride + 1
            if oh < 1 or ow < 1:
                continue
            wname = fresh("w")
            tensors.append(Tensor.from_array(wname, rng.normal(0, 0.5, (oc, c, k, k))))
            line = f"conv2d weight={wname} stride={stride} pad={pad}"
            if rng.random() < 0.5:
                bname = fresh("b")
                tensors.append(Tensor.from_array(bname, rng.normal(0, 0.3, oc)))
                line += f" bias={bname}"
            lines.append(line)
            shape = (oc, oh, ow)
        elif kind == "dense":
            out_n = int(rng.integers(1, 17))
            wname = fresh("w")
            tensors.append(Tensor.from_array(wname, rng.normal(0, 0.4, (out_n, shape[0]))))
            line = f"dense weight={wname}"
            if rng.random() < 0.5:
                bname = fresh("b")
                tensors.append(Tensor.from_array(bname, rng.normal(0, 0.3, out_n)))
                line += f" bias={bname}"
            lines.append(line)
            shape = (out_n,)
        elif kind == "batchnorm":
            ch = shape[0]
            names = [fresh(p) for p in ("scale", "shift", "mean", "var")]
            tensors.append(Tensor.from_array(names[0], rng.uniform(0.5, 1.5, ch)))
            tensors.append(Tensor.from_array(names[1], rng.normal(0, 0.3, ch)))
            tensors.append(Tensor.from_array(names[2], rng.normal(0, 0.3, ch)))
            tensors.append(Tensor.from_array(names[3], rng.uniform(0.5, 1.5, ch)))
            lines.append(
                f"batchnorm scale={names[0]} shift={names[1]} mean={names[2]} var={names[3]} eps=0.001"
            )
        elif kind == "pool":
            c, h, w = shape
            if min(h, w) < 2:
                continue
            size = 2
            stride = int(rng.integers(1, 3))
            op = "maxpool" if rng.random() < 0.5 else "avgpool"
            oh = (h - size) // stride + 1
            ow = (w - size) // stride + 1
            lines.append(f"{op} size={size} stride={stride}")
            shape = (c, oh, ow)
        elif kind == "flatten":
            lines.append("flatten")
            shape = (int(np.prod(shape)),)
        elif kind == "relu":
            lines.append("relu")
        elif kind == "softmax":
            lines.append("softmax")

    model = ModelFile(tensors, "\n".join(lines) + "\n")
    x = rng.normal(0, 1.0, model_input_shape(model)).astype(np.float32)
    return model, x


def model_input_shape(model: ModelFile) -> tuple[int, ...]:
    first = model.graph.splitlines()[0]
    spec = first.split("shape=", 1)[1].split()[0]
    return tuple(int(d) for d in spec.split("x"))
