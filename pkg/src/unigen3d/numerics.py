"""Tensor I/O, counter-based randomness, cosine kernel and the gradient checker."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable

import numpy as np

NORM_EPS = 1e-12
TENSOR_MAGIC = b"ULT1"


class ShapeError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# randomness

class RngStream:
    """Replayable random stream keyed by ``(seed, counter)``.

    Every draw builds a Philox generator whose 128-bit key is
    ``seed | counter << 64`` and then bumps ``counter`` by one, so a stream
    positioned at the same ``(seed, counter)`` reproduces the same draws on
    any platform numpy supports. Not thread-safe; use :meth:`split`.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def _next(self) -> np.random.Generator:
        key = self.seed | (self.counter << 64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self._next().uniform(lo, hi, size)

    def normal(self, size=None):
        return self._next().standard_normal(size)

    def integers(self, lo, hi, size=None):
        return self._next().integers(lo, hi, size)

    def permutation(self, n):
        return self._next().permutation(n)

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator consuming one counter slot."""
        return self._next()

    def split(self, index: int) -> "RngStream":
        ss = np.random.SeedSequence([self.seed, self.counter, int(index)])
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))

    def torch_seed(self) -> int:
        """A 63-bit seed for ``torch.manual_seed`` drawn from this stream."""
        return int(self._next().integers(0, 2**63 - 1))


def draw_uniform(rng: RngStream, lo: float, hi: float) -> float:
    if lo > hi:
        raise ValueError(f"draw_uniform: lo={lo} > hi={hi}")
    if lo == hi:
        rng.counter += 1
        return float(lo)
    value = float(rng.uniform(lo, hi))
    # [lo, hi) even if the affine map rounds up
    return value if value < hi else float(np.nextafter(hi, lo))


# ---------------------------------------------------------------------------
# cosine kernel

def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ShapeError("cosine_similarity of empty vectors")
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.size} vs {b.size}")
    c = float(a @ b) / (float(np.linalg.norm(a) * np.linalg.norm(b)) + NORM_EPS)
    return min(1.0, max(-1.0, c))


def cosine_matrix(a, b, eps: float = NORM_EPS):
    """Pairwise cosines between rows of ``a`` (..., P, C) and ``b`` (..., Q, C).

    Works on numpy arrays and torch tensors alike.
    """
    na = (a * a).sum(-1, keepdims=True) ** 0.5
    nb = (b * b).sum(-1, keepdims=True) ** 0.5
    num = a @ b.swapaxes(-1, -2)
    return num / (na * nb.swapaxes(-1, -2) + eps)


def rowwise_cosine(a, b, eps: float = NORM_EPS):
    num = (a * b).sum(-1)
    den = ((a * a).sum(-1) ** 0.5) * ((b * b).sum(-1) ** 0.5) + eps
    return num / den


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    n_probes: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    grad_f: Callable[[np.ndarray], np.ndarray],
    point,
    step: float = 1e-5,
    max_coords: int | None = 64,
    rng: RngStream | None = None,
    skip: Callable[[np.ndarray, tuple], bool] | None = None,
) -> GradCheckReport:
    """Compare ``grad_f`` against central differences of ``f`` at ``point``.

    Tensors with more than ``max_coords`` entries are probed on a random
    subset of that size (drawn from ``rng``). ``skip(point, index)`` may veto
    a coordinate, e.g. one whose probe straddles a kink.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    g = np.asarray(grad_f(x.copy()), dtype=np.float64)
    if g.shape != x.shape:
        raise ShapeError(f"gradient shape {g.shape} != point shape {x.shape}")

    flat = np.arange(x.size)
    if max_coords is not None and x.size > max_coords:
        rng = rng or RngStream(0)
        flat = np.sort(rng.generator().choice(x.size, size=max_coords, replace=False))

    report = GradCheckReport(0.0, (), 0.0, 0.0)
    for k in flat:
        idx = np.unravel_index(k, x.shape)
        if skip is not None and skip(x, idx):
            continue
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x.copy())
        x[idx] = orig - step
        fm = f(x.copy())
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite value probing index {idx}")
        num = (fp - fm) / (2.0 * step)
        ana = float(g[idx])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        report.n_probes += 1
        if report.n_probes == 1 or rel > report.max_rel_error:
            report.max_rel_error = rel
            report.worst_index = tuple(int(i) for i in idx)
            report.analytic, report.numeric = ana, num
    return report


# ---------------------------------------------------------------------------
# raw tensor format: "ULT1", u32 rank, u32 dims..., f32 payload (little-endian)

def write_tensor_block(fh: BinaryIO, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor_block(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor_block(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor_block(fh)


# ---------------------------------------------------------------------------
# weights file: "ULW1", then per entry u16 name length, name bytes, ULT1 block

WEIGHTS_MAGIC = b"ULW1"


def save_named_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        for name, value in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            write_tensor_block(fh, np.asarray(value))


def load_named_tensors(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHTS_MAGIC:
            raise ValueError(f"{path}: not a ULW1 weights file")
        while True:
            head = fh.read(2)
            if not head:
                break
            (n,) = struct.unpack("<H", head)
            name = fh.read(n).decode("utf-8")
            out[name] = read_tensor_block(fh)
    return out
