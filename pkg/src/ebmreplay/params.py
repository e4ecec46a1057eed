"""Parameter registry, gradient-descent updates, checkpoints, grad checking."""

from __future__ import annotations

import struct
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor, backward
from .errors import ContractError, DataFormatError, NumericError

CHECKPOINT_MAGIC = b"EBMCL1"


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Named map of trainable tensors plus per-parameter optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step_count: int = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def freeze(self) -> None:
        for t in self._params.values():
            t.requires_grad = False

    def unfreeze(self) -> None:
        for t in self._params.values():
            t.requires_grad = True

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def clone_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            t = self[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractError(
                    f"parameter {name!r}: stored shape {arr.shape} != model shape {t.data.shape}"
                )
            t.data[...] = arr


def optimizer_step(
    store: ParamStore,
    lr: float,
    method: str = "adam",
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Descend the loss gradient held in each parameter's ``.grad``.

    ``method`` is "adam" (adaptive moments, bias-corrected) or "sgd" (plain
    update). Gradients are cleared afterward.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    if method not in ("adam", "sgd"):
        raise ContractError(f"unknown optimizer method {method!r}")
    for name, t in store.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        if t.grad.shape != t.data.shape:
            raise ContractError(
                f"parameter {name!r}: grad shape {t.grad.shape} != value shape {t.data.shape}"
            )
    store.step_count += 1
    if method == "sgd":
        for _, t in store.items():
            t.data -= lr * t.grad
    else:
        k = store.step_count
        for name, t in store.items():
            m = store._m.get(name)
            if m is None:
                m = store._m[name] = np.zeros_like(t.data)
            v = store._v.get(name)
            if v is None:
                v = store._v[name] = np.zeros_like(t.data)
            m *= beta1
            m += (1.0 - beta1) * t.grad
            v *= beta2
            v += (1.0 - beta2) * t.grad * t.grad
            m_hat = m / (1.0 - beta1**k)
            v_hat = v / (1.0 - beta2**k)
            t.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grads()


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic given fixed randomness and return a scalar
    Tensor built from the store's parameters. Relative error per component is
    |analytic - fd| / max(1, |analytic|).
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    store.zero_grads()
    loss = f(store)
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_diff_check: objective evaluated non-finite")
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in store.items()
    }
    store.zero_grads()

    worst = 0.0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(store).item()
            flat[i] = orig - eps
            down = f(store).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"finite_diff_check: non-finite evaluation perturbing {name!r}")
            fd = (up - down) / (2.0 * eps)
            err = abs(a_flat[i] - fd) / max(1.0, abs(a_flat[i]))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# checkpoint I/O
#
# Layout: magic "EBMCL1", uint32 entry count, then per entry:
#   uint16 name length, name bytes (utf-8), uint8 ndim, ndim x uint32 dims,
#   prod(dims) x float64 values. All integers and floats little-endian.


def save_checkpoint(path, stores: dict[str, ParamStore]) -> None:
    """Write named stores to one file; entry names are '<store>/<param>'."""
    entries: list[tuple[str, np.ndarray]] = []
    for store_name, store in stores.items():
        for name, t in store.items():
            entries.append((f"{store_name}/{name}", t.data))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into a flat name -> array map."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise DataFormatError(f"checkpoint truncated while reading {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        return out


def load_checkpoint(path, stores: dict[str, ParamStore]) -> None:
    """Load '<store>/<param>' entries back into the given stores."""
    flat = read_checkpoint(path)
    for store_name, store in stores.items():
        prefix = store_name + "/"
        values = {k[len(prefix) :]: v for k, v in flat.items() if k.startswith(prefix)}
        missing = set(store.names()) - set(values)
        if missing:
            raise DataFormatError(f"checkpoint missing parameters for {store_name!r}: {sorted(missing)}")
        store.load_values(values)
