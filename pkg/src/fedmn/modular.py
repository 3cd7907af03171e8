"""Per-client modular network: encoders, gated MLP blocks and path bookkeeping.

A decision vector holds one gate per possible connection path.  Entries are
grouped layer pair by layer pair; within the pair (l-1, l) the index of the
path from source block ``k`` to target block ``j`` is ``offset + k * n_l + j``.
The final ``n_L`` entries gate the last-layer blocks into the output average.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, RoutingError, ShapeError
from .tensor import Tensor

GATE_EPS = 1e-6


@dataclass(frozen=True)
class ArchitectureSpec:
    layer_widths: tuple
    input_dim: int
    num_classes: int
    encoder_out_dim: int = 64
    block_hidden_dim: int = 256
    block_out_dim: int = 64
    block_depth: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(n) for n in self.layer_widths))
        problems = []
        if len(self.layer_widths) < 2:
            problems.append(f"need at least 2 layers, got {list(self.layer_widths)}")
        if any(n < 1 for n in self.layer_widths):
            problems.append(f"every layer needs >= 1 block, got {list(self.layer_widths)}")
        for name in ("input_dim", "num_classes", "encoder_out_dim", "block_hidden_dim", "block_out_dim"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        if self.block_depth not in (1, 2):
            problems.append(f"block_depth must be 1 or 2, got {self.block_depth}")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def from_string(cls, arch: str, **dims) -> "ArchitectureSpec":
        return cls(parse_architecture(arch), **dims)

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths)

    def width(self, layer: int) -> int:
        """Blocks in ``layer`` (1-based, layer 1 = encoders)."""
        return self.layer_widths[layer - 1]

    @property
    def arch_string(self) -> str:
        return "x".join(str(n) for n in self.layer_widths)

    def block_keys(self) -> list:
        """Non-encoder blocks in mask order: layer 2 first, then by index."""
        return [(l, j) for l in range(2, self.num_layers + 1) for j in range(self.width(l))]

    def block_io(self, layer: int) -> tuple:
        d_in = self.encoder_out_dim if layer == 2 else self.block_out_dim
        d_out = self.num_classes if layer == self.num_layers else self.block_out_dim
        return d_in, d_out

    def block_shapes(self, layer: int) -> dict:
        d_in, d_out = self.block_io(layer)
        if self.block_depth == 1:
            return {"w0": (d_in, d_out), "b0": (d_out,)}
        h = self.block_hidden_dim
        return {"w0": (d_in, h), "b0": (h,), "w1": (h, d_out), "b1": (d_out,)}

    def encoder_shapes(self) -> dict:
        return {"w0": (self.input_dim, self.encoder_out_dim), "b0": (self.encoder_out_dim,)}


_ARCH_RE = re.compile(r"^\s*\d+(\s*[x×]\s*\d+)+\s*$")


def parse_architecture(arch: str) -> tuple:
    """``"1x4x3"`` -> ``(1, 4, 3)``."""
    if not isinstance(arch, str) or not _ARCH_RE.match(arch):
        raise ConfigError(f"architecture must look like '2x2x2', got {arch!r}")
    return tuple(int(p) for p in re.split(r"[x×]", arch.replace(" ", "")))


def path_count(spec) -> int:
    widths = spec.layer_widths if isinstance(spec, ArchitectureSpec) else tuple(spec)
    return int(np.sum([a * b for a, b in zip(widths[:-1], widths[1:])]) + widths[-1])


def block_count(spec) -> int:
    widths = spec.layer_widths if isinstance(spec, ArchitectureSpec) else tuple(spec)
    return int(np.sum(widths[1:]))


def _widths(spec) -> tuple:
    return spec.layer_widths if isinstance(spec, ArchitectureSpec) else tuple(spec)


def pair_offset(spec, layer: int) -> int:
    """Index of the first path feeding ``layer`` (2 <= layer <= L)."""
    w = _widths(spec)
    return int(np.sum([w[i] * w[i + 1] for i in range(layer - 2)], dtype=np.int64))


def edge_index(spec, layer: int, source: int, target: int) -> int:
    w = _widths(spec)
    return pair_offset(spec, layer) + source * w[layer - 1] + target


def output_index(spec, block: int) -> int:
    return path_count(spec) - _widths(spec)[-1] + block


@dataclass
class DecisionVector:
    """Path gates, relaxed in [0, 1] or hard in {0, 1}."""

    values: Tensor
    hard: bool = False
    noise: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = T.tensor(self.values)
        data = self.values.data
        if data.ndim != 1:
            raise ShapeError("DecisionVector", data.shape)
        if np.any(data < 0) or np.any(data > 1) or not np.all(np.isfinite(data)):
            raise ValueError("decision entries must lie in [0, 1]")
        if self.hard and not np.all((data == 0) | (data == 1)):
            raise ValueError("hard decision entries must be 0 or 1")

    @classmethod
    def ones(cls, spec) -> "DecisionVector":
        return cls(np.ones(path_count(spec)), hard=True)

    @classmethod
    def from_bits(cls, bits) -> "DecisionVector":
        if isinstance(bits, str):
            bits = [int(b) for b in bits]
        return cls(np.asarray(bits, dtype=float), hard=True)

    def __len__(self) -> int:
        return self.values.data.shape[0]

    @property
    def data(self) -> np.ndarray:
        return self.values.data

    def bitstring(self) -> str:
        if not self.hard:
            raise ValueError("bitstring needs a hard decision")
        return "".join("1" if v else "0" for v in self.data)


def connection_matrices(V, spec) -> tuple:
    """Reshape gates into per-pair matrices C[l] of shape (n_l, n_{l-1}) plus output gates."""
    data = V.data if isinstance(V, DecisionVector) else np.asarray(V, dtype=float)
    if data.shape != (path_count(spec),):
        raise ShapeError("connection_matrices", data.shape, (path_count(spec),))
    w = _widths(spec)
    mats = {}
    for l in range(2, len(w) + 1):
        start = pair_offset(spec, l)
        block = data[start:start + w[l - 2] * w[l - 1]].reshape(w[l - 2], w[l - 1])
        mats[l] = block.T.copy()
    return mats, data[-w[-1]:].copy()


def active_mask(V_hard, spec) -> np.ndarray:
    """Blocks reachable from the encoders through gates equal to 1, in mask order."""
    data = V_hard.data if isinstance(V_hard, DecisionVector) else np.asarray(V_hard, dtype=float)
    mats, _ = connection_matrices(data, spec)
    w = _widths(spec)
    alive = np.ones(w[0], dtype=bool)
    mask = []
    for l in range(2, len(w) + 1):
        alive = (mats[l][:, alive] == 1).any(axis=1)
        mask.extend(alive.tolist())
    return np.array(mask, dtype=bool)


def repair_output_path(V_hard, probs, spec) -> DecisionVector:
    """Guarantee at least one live path from an encoder to the output.

    When no reachable last-layer block has its output gate on, the output gate
    with the highest routing probability among reachable last-layer blocks is
    switched on.  If no last-layer block is reachable at all, the
    highest-probability output gate is switched on and incoming paths are
    added backwards, highest probability first, until an encoder is reached.
    Ties go to the lowest index.
    """
    data = (V_hard.data if isinstance(V_hard, DecisionVector) else np.asarray(V_hard, float)).copy()
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=float)
    w = _widths(spec)
    L = len(w)
    mask = active_mask(data, spec)
    last_alive = mask[-w[-1]:]
    outputs = data[-w[-1]:]
    if np.any(last_alive & (outputs == 1)):
        return DecisionVector(data, hard=True)

    out_probs = probs[-w[-1]:]
    if last_alive.any():
        candidates = np.flatnonzero(last_alive)
        j = int(candidates[np.argmax(out_probs[candidates])])
        data[output_index(spec, j)] = 1.0
        return DecisionVector(data, hard=True)

    j = int(np.argmax(out_probs))
    data[output_index(spec, j)] = 1.0
    # per-layer reachability before the repair
    alive = {1: np.ones(w[0], dtype=bool)}
    start = 0
    for l in range(2, L + 1):
        alive[l] = mask[start:start + w[l - 1]]
        start += w[l - 1]
    target = j
    for l in range(L, 1, -1):
        sources = np.arange(w[l - 2])
        idx = np.array([edge_index(spec, l, k, target) for k in sources])
        live_sources = sources[alive[l - 1]]
        pool = live_sources if live_sources.size else sources
        pick = pool[np.argmax(probs[idx[pool]])]
        data[idx[pick]] = 1.0
        if alive[l - 1][pick]:
            break
        target = int(pick)
    return DecisionVector(data, hard=True)


def _block_forward(x: Tensor, params: list, final: bool) -> Tensor:
    n = len(params) // 2
    h = x
    for i in range(n):
        h = T.affine(h, params[2 * i], params[2 * i + 1])
        if i < n - 1 or not final:
            h = T.relu(h)
    return h


def encode(x, pool) -> list:
    """Outputs of every encoder block; each encoder is affine + relu."""
    x = T.tensor(x)
    spec = pool.spec
    if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError("encode", x.shape, (None, spec.input_dim))
    return [_block_forward(x, pool.block_params(1, j), final=False) for j in range(spec.width(1))]


def _mix(upstream: list, gates: Tensor, eps: float):
    """Gate-weighted mean of live upstream outputs, or None below the threshold."""
    g = gates.data
    live = [k for k, u in enumerate(upstream) if u is not None and g[k] != 0.0]
    total = 0.0
    for k in live:
        total += g[k]
    if not live or total <= eps:
        return None
    acc = den = None
    for k in live:
        gk = gates[k]
        term = gk * upstream[k]
        acc = term if acc is None else acc + term
        den = gk if den is None else den + gk
    return acc / den


def block_input(upstream: list, gates, eps: float = GATE_EPS) -> Tensor:
    """Input of one block given its upstream outputs and incoming gates.

    Returns ``sum_k g_k u_k / sum_k g_k`` when ``sum_k g_k > eps`` and the
    zero tensor otherwise.
    """
    gates = T.tensor(gates)
    if gates.shape != (len(upstream),):
        raise ShapeError("block_input", gates.shape, (len(upstream),))
    shapes = {u.shape for u in upstream}
    if len(shapes) != 1:
        raise ShapeError("block_input", *shapes)
    out = _mix(list(upstream), gates, eps)
    if out is None:
        return Tensor(np.zeros(upstream[0].shape))
    return out


def forward(x, V: DecisionVector, pool, fallback: int | None = None, eps: float = GATE_EPS,
            return_alive: bool = False):
    """Logits of the assembled network for a batch ``x``.

    Blocks whose gated input sum does not exceed ``eps`` are dead: they are not
    evaluated and every path leaving them is ignored, so their parameters have
    no influence on the result.  ``fallback`` names the output gate forced to 1
    when no live output gate remains.
    """
    spec = pool.spec
    E = path_count(spec)
    if len(V) != E:
        raise ShapeError("forward (decision length)", (len(V),), (E,))
    gates = V.values
    outputs = encode(x, pool)
    alive = {}
    L = spec.num_layers
    for l in range(2, L + 1):
        n_prev, n_here = spec.width(l - 1), spec.width(l)
        layer_out = []
        for j in range(n_here):
            idx = [edge_index(spec, l, k, j) for k in range(n_prev)]
            u = _mix(outputs, gates[np.array(idx)], eps)
            if u is None:
                layer_out.append(None)
                alive[(l, j)] = False
            else:
                layer_out.append(_block_forward(u, pool.block_params(l, j), final=(l == L)))
                alive[(l, j)] = True
        outputs = layer_out

    out_gates = gates[np.arange(E - spec.width(L), E)]
    logits = _mix(outputs, out_gates, eps)
    if logits is None:
        if fallback is None:
            raise RoutingError("no live output gate and no fallback given")
        u = outputs[fallback]
        if u is None:
            x_t = T.tensor(x)
            d_in, _ = spec.block_io(L)
            zero = Tensor(np.zeros((x_t.shape[0], d_in)))
            u = _block_forward(zero, pool.block_params(L, fallback), final=True)
        logits = u
    if return_alive:
        return logits, alive
    return logits
