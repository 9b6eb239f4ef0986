"""Constructive policy: node embedding, mixed-bias attention-free encoder,
problem-conditioned bias networks and the weight-decomposed adaptive decoder.

Parameters live in a flat ``dict[str, Tensor]`` so the optimizer and the
checkpoint writer can treat them uniformly.  Everything is batched: the
encoder runs over a stack of instances (I, N, d), the decoder over a stack of
trajectories (T, ...) that point into it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as tn
from .errors import DomainError, InvalidParameterError, ShapeError
from .pivots import PivotSet, bfr_embed, fps_select
from .quasimetric import make_rng, symmetrize_mean, zscore_normalize
from .tensor import Tensor
from .variants import LAMBDA_FIELDS, OMEGA_FIELDS, XI_FIELDS, Instance, build_lambda, build_udr

DECODER_MATRICES = ("Wq_first", "Wq_last", "Wk", "Wv", "Wc")
N_LAMBDA = len(LAMBDA_FIELDS)
N_OMEGA = len(OMEGA_FIELDS)
N_XI = len(XI_FIELDS)
MASKED = -1e8


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 12
    d_ff: int = 512
    n_pivots: int = 8
    rank: int = 32
    heads: int = 3
    zeta: float = 50.0
    wdad_eps: float = 1e-6
    norm_eps: float = 1e-5

    @property
    def udr_width(self) -> int:
        return 2 * self.n_pivots + N_OMEGA + N_XI


PRESETS = {
    "paper": ModelConfig(),
    "desk": ModelConfig(d_model=16, n_layers=2, d_ff=64, n_pivots=4, rank=8, heads=3),
}


def get_preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise InvalidParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# -- parameters ----------------------------------------------------------------
def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias_net(rng, p: dict, prefix: str, cfg: ModelConfig):
    d = cfg.d_model
    # default linear-layer init: weights and biases U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    p[prefix + ".W1"] = _uniform(rng, (N_LAMBDA, d), N_LAMBDA)
    p[prefix + ".b1"] = _uniform(rng, (d,), N_LAMBDA)
    p[prefix + ".W2"] = _uniform(rng, (d, 1), d)
    p[prefix + ".b2"] = _uniform(rng, (1,), d)


def _decoder_shapes(cfg: ModelConfig) -> dict:
    d = cfg.d_model
    return {"Wq_first": (d, d), "Wq_last": (d, d), "Wk": (d, d), "Wv": (d, d), "Wc": (1, d)}


def init_params(cfg: ModelConfig, seed=0) -> dict[str, Tensor]:
    rng = make_rng(seed)
    d = cfg.d_model
    p: dict[str, np.ndarray] = {}
    p["embed.W_phi"] = _uniform(rng, (2 * cfg.n_pivots, d), 2 * cfg.n_pivots)
    p["embed.W_omega"] = _uniform(rng, (N_OMEGA, d), N_OMEGA)
    p["embed.W_xi"] = _uniform(rng, (N_XI, d), N_XI)
    for l in range(cfg.n_layers):
        pre = f"enc.{l}"
        for b in range(3):
            for w in ("Wq", "Wk", "Wv"):
                p[f"{pre}.branch{b}.{w}"] = _uniform(rng, (d, d), d)
            _bias_net(rng, p, f"{pre}.branch{b}.alpha", cfg)
        p[f"{pre}.Wo"] = _uniform(rng, (3 * d, d), 3 * d)
        p[f"{pre}.ff.W1"] = _uniform(rng, (d, cfg.d_ff), d)
        p[f"{pre}.ff.b1"] = np.zeros(cfg.d_ff)
        # no output bias: a per-channel constant cancels in the following instance norm
        p[f"{pre}.ff.W2"] = _uniform(rng, (cfg.d_ff, d), cfg.d_ff)
        for k in (1, 2):
            p[f"{pre}.norm{k}.w"] = np.ones(d)
            p[f"{pre}.norm{k}.b"] = np.zeros(d)
    for name, (d_in, d_out) in _decoder_shapes(cfg).items():
        p[f"dec.{name}.W0"] = _uniform(rng, (d_in, d_out), d_in)
        p[f"dec.{name}.up"] = rng.normal(0.0, 0.01, size=(N_LAMBDA, cfg.heads, d_out, cfg.rank))
        p[f"dec.{name}.down"] = _uniform(rng, (N_LAMBDA, cfg.heads, cfg.rank, d_in), cfg.rank * d_in)
        p[f"dec.{name}.g"] = np.zeros((N_LAMBDA, cfg.heads, d_out))
    _bias_net(rng, p, "dec.alpha_attn", cfg)
    _bias_net(rng, p, "dec.alpha_com", cfg)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def param_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in arrays.items()}


def describe(params: dict[str, Tensor]) -> dict[str, int]:
    """Parameter counts per block (embed, each encoder layer, decoder base,
    decoder adapters, decoder bias nets)."""
    out: dict[str, int] = {}
    for name, t in params.items():
        parts = name.split(".")
        if parts[0] == "enc":
            key = f"encoder.layer{parts[1]}"
        elif parts[0] == "dec":
            if parts[1].startswith("alpha"):
                key = "decoder.bias_nets"
            elif parts[2] == "W0":
                key = "decoder.base"
            else:
                key = "decoder.adapters"
        else:
            key = parts[0]
        out[key] = out.get(key, 0) + int(t.data.size)
    out["total"] = sum(v for k, v in out.items())
    return out


# -- building blocks -------------------------------------------------------------
def embed_nodes(udr, params: dict, cfg: ModelConfig) -> Tensor:
    u = tn.as_tensor(udr)
    w = 2 * cfg.n_pivots
    if u.shape[-1] != cfg.udr_width:
        raise ShapeError(f"UDR width {u.shape[-1]} does not match model width {cfg.udr_width}")
    phi = u[..., :w]
    om = u[..., w:w + N_OMEGA]
    xi = u[..., w + N_OMEGA:]
    return phi @ params["embed.W_phi"] + om @ params["embed.W_omega"] + xi @ params["embed.W_xi"]


def bias_alpha(lam, params: dict, prefix: str) -> Tensor:
    """alpha = max(0, (lambda W1 + b1) W2 + b2) as a (1, 1) tensor."""
    lam = tn.as_tensor(np.asarray(lam, dtype=np.float64).reshape(1, -1))
    hidden = lam @ params[prefix + ".W1"] + params[prefix + ".b1"]
    return tn.relu(hidden @ params[prefix + ".W2"] + params[prefix + ".b2"])


def aafm(Q, K, V, A) -> Tensor:
    """sigma(Q) * [exp(A)(exp(K) * V)] / [exp(A) exp(K)] with max-shift stabilization."""
    Q, K, V, A = (tn.as_tensor(x) for x in (Q, K, V, A))
    if K.shape != V.shape or Q.shape[-1] != K.shape[-1] or A.shape[-1] != K.shape[-2]:
        raise ShapeError(f"aafm shapes Q{Q.shape} K{K.shape} V{V.shape} A{A.shape}")
    if np.any(np.all(A.data <= MASKED, axis=-1)):
        raise DomainError("aafm bias row is entirely masked")
    a_shift = A.data.max(axis=-1, keepdims=True)
    k_shift = K.data.max(axis=-2, keepdims=True)
    eA = tn.exp(A - a_shift)
    eK = tn.exp(K - k_shift)
    num = eA @ (eK * V)
    den = eA @ eK
    return tn.sigmoid(Q) * (num / den)


def aafm_reference(Q, K, V, A) -> np.ndarray:
    """Unstabilized formula on raw arrays (for testing the shifted version)."""
    Q, K, V, A = (np.asarray(x, dtype=np.float64) for x in (Q, K, V, A))
    eA, eK = np.exp(A), np.exp(K)
    return 1.0 / (1.0 + np.exp(-Q)) * ((eA @ (eK * V)) / (eA @ eK))


def adaptation_bias(alpha, n_nodes: int, d_norm, scale_by_n: bool = True) -> Tensor:
    if n_nodes < 2:
        raise InvalidParameterError("adaptation bias needs N >= 2")
    factor = math.log2(n_nodes) if scale_by_n else 1.0
    return tn.as_tensor(alpha) * (-factor) * tn.as_tensor(d_norm)


def relation_matrix(inst: Instance) -> Optional[np.ndarray]:
    """0 for pickup-delivery pairs (both directions), 1 elsewhere; None without PD."""
    if not inst.spec.PD:
        return None
    R = np.ones((inst.n_nodes, inst.n_nodes))
    for p, q in inst.pd_pairs:
        R[p, q] = R[q, p] = 0.0
    return R


def mbm(H, D_norm, DT_norm, R, lam, params: dict, layer: int, n_nodes: int) -> Tensor:
    pre = f"enc.{layer}"
    biases = [
        adaptation_bias(bias_alpha(lam, params, f"{pre}.branch0.alpha"), n_nodes, D_norm),
        adaptation_bias(bias_alpha(lam, params, f"{pre}.branch1.alpha"), n_nodes, DT_norm),
    ]
    outs = []
    for b, A in enumerate(biases):
        bp = f"{pre}.branch{b}"
        outs.append(aafm(H @ params[bp + ".Wq"], H @ params[bp + ".Wk"], H @ params[bp + ".Wv"], A))
    if R is None:
        outs.append(Tensor(np.zeros(H.shape)))
    else:
        A = adaptation_bias(bias_alpha(lam, params, f"{pre}.branch2.alpha"), n_nodes, R, scale_by_n=False)
        bp = f"{pre}.branch2"
        outs.append(aafm(H @ params[bp + ".Wq"], H @ params[bp + ".Wk"], H @ params[bp + ".Wv"], A))
    return tn.concat(outs, axis=-1) @ params[pre + ".Wo"]


def _norm(x, params, key, eps):
    return tn.instance_norm(x, axis=-2, eps=eps) * params[key + ".w"] + params[key + ".b"]


def encoder_layer(H, D_norm, DT_norm, R, lam, params, cfg: ModelConfig, layer: int, n_nodes: int) -> Tensor:
    pre = f"enc.{layer}"
    h = _norm(H + mbm(H, D_norm, DT_norm, R, lam, params, layer, n_nodes), params, pre + ".norm1", cfg.norm_eps)
    ff = tn.relu(h @ params[pre + ".ff.W1"] + params[pre + ".ff.b1"]) @ params[pre + ".ff.W2"]
    return _norm(h + ff, params, pre + ".norm2", cfg.norm_eps)


def wdad_delta(lam, up, down, g, eps: float = 1e-6) -> Tensor:
    """Mean over active attributes of sum over heads of g * (U D) / (row norm + eps).

    Shapes: up (A, H, d_out, r), down (A, H, r, d_in), g (A, H, d_out).
    Returns (d_out, d_in).
    """
    lam = np.asarray(lam, dtype=np.float64).reshape(-1)
    z = max(1.0, float(np.abs(lam).sum()))
    ud = tn.as_tensor(up) @ tn.as_tensor(down)
    rn = tn.sqrt((ud * ud).sum(axis=-1, keepdims=True))
    g = tn.as_tensor(g)
    delta = g.reshape(g.shape + (1,)) * (ud / (rn + eps))
    weights = (lam / z).reshape(-1, 1, 1, 1)
    return (delta * weights).sum(axis=(0, 1))


def wdad_effective_weights(lam, params: dict, cfg: ModelConfig) -> dict[str, Tensor]:
    lam = np.asarray(lam, dtype=np.float64).reshape(-1)
    out = {}
    for name in DECODER_MATRICES:
        W0 = params[f"dec.{name}.W0"]
        if not np.any(lam):
            out[name] = W0
            continue
        delta = wdad_delta(lam, params[f"dec.{name}.up"], params[f"dec.{name}.down"],
                           params[f"dec.{name}.g"], cfg.wdad_eps)
        out[name] = W0 + delta.T
    return out


# -- features ----------------------------------------------------------------------
def pivot_indices(inst: Instance, M: int, seeds: Sequence[int]) -> list[int]:
    """FPS pivots under the mean-symmetrized metric; on instances with fewer
    than M nodes the full node set is cycled to fill M slots."""
    N = inst.n_nodes
    d_fps = symmetrize_mean(inst.dist)
    seeds = list(dict.fromkeys(int(s) for s in seeds))[: min(M, N)]
    chosen = list(fps_select(d_fps, min(M, N), seeds).indices)
    k = 0
    while len(chosen) < M:
        chosen.append(chosen[k % N])
        k += 1
    return chosen


def bfr_features(inst: Instance, M: int, seeds: Sequence[int]) -> np.ndarray:
    idx = pivot_indices(inst, M, seeds)
    if len(set(idx)) == len(idx):
        return bfr_embed(inst.dist, PivotSet(tuple(idx), tuple(list(dict.fromkeys(seeds))[:M]))).coords
    D = inst.d
    coords = np.empty((inst.n_nodes, 2 * M))
    coords[:, 0::2] = D[:, idx]
    coords[:, 1::2] = D[idx, :].T
    return coords / math.sqrt(2 * M)


@dataclass(eq=False)
class EncodedBatch:
    """Encoder output for a stack of same-spec instances plus decoder caches."""

    H: Tensor                 # (I, N, d)
    K: Tensor                 # (I, N, d)
    V: Tensor                 # (I, N, d)
    D_norm: np.ndarray        # (I, N, N)
    lam: np.ndarray
    weights: dict
    alpha_attn: Tensor
    alpha_com: Tensor
    n_nodes: int


def encode(instances: Sequence[Instance], seeds: Sequence[Sequence[int]], params: dict, cfg: ModelConfig) -> EncodedBatch:
    spec = instances[0].spec
    lam = build_lambda(spec).astype(np.float64)
    udr = np.stack([build_udr(inst, bfr_features(inst, cfg.n_pivots, s)) for inst, s in zip(instances, seeds)])
    Dn = np.stack([zscore_normalize(inst.dist) for inst in instances])
    DTn = np.swapaxes(Dn, -1, -2).copy()
    R = None
    if spec.PD:
        R = np.stack([relation_matrix(inst) for inst in instances])
    N = instances[0].n_nodes
    H = embed_nodes(udr, params, cfg)
    for l in range(cfg.n_layers):
        H = encoder_layer(H, Dn, DTn, R, lam, params, cfg, l, N)
    W = wdad_effective_weights(lam, params, cfg)
    return EncodedBatch(
        H=H, K=H @ W["Wk"], V=H @ W["Wv"], D_norm=Dn, lam=lam, weights=W,
        alpha_attn=bias_alpha(lam, params, "dec.alpha_attn"),
        alpha_com=bias_alpha(lam, params, "dec.alpha_com"), n_nodes=N,
    )


@dataclass(eq=False)
class TrajectoryView:
    """Per-trajectory gathers of the encoder output (computed once per rollout)."""

    H: Tensor
    K: Tensor
    V: Tensor
    D_norm: np.ndarray
    inst: np.ndarray


def trajectory_view(enc: EncodedBatch, inst_index) -> TrajectoryView:
    idx = np.asarray(inst_index, dtype=np.int64)
    return TrajectoryView(H=enc.H[idx], K=enc.K[idx], V=enc.V[idx], D_norm=enc.D_norm[idx], inst=idx)


def decode_logits(enc: EncodedBatch, view: TrajectoryView, first, current, c_t, mask, cfg: ModelConfig) -> Tensor:
    """Clipped, masked logits (T, N); masked entries carry the additive mask."""
    T = len(view.inst)
    rows = np.arange(T)
    first = np.asarray(first, dtype=np.int64)
    current = np.asarray(current, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    W = enc.weights
    h_first = view.H[rows, first]
    h_last = view.H[rows, current]
    c = Tensor(np.asarray(c_t, dtype=np.float64).reshape(T, 1))
    q = h_first @ W["Wq_first"] + h_last @ W["Wq_last"] + c @ W["Wc"]
    q = q.reshape(T, 1, cfg.d_model)
    d_row = view.D_norm[rows, current].reshape(T, 1, -1)
    logn = math.log2(enc.n_nodes)
    A = enc.alpha_attn * (-logn) * d_row + mask.reshape(T, 1, -1)
    readout = aafm(q, view.K, view.V, A)
    s = (readout @ view.H.T) * (1.0 / math.sqrt(cfg.d_model)) - enc.alpha_com * logn * d_row
    return (cfg.zeta * tn.tanh(s)).reshape(T, -1)


def decode_step(enc: EncodedBatch, view: TrajectoryView, first, current, c_t, mask, cfg: ModelConfig) -> Tensor:
    """Next-node probabilities (T, N), exactly zero on masked nodes."""
    return tn.masked_softmax(decode_logits(enc, view, first, current, c_t, mask, cfg), mask)


def problem_state_scalar(state, spec, pc_threshold: Optional[float] = None) -> float:
    """Context scalar C_t for a scalar RolloutState: remaining load, remaining
    orienteering budget (as a fraction), or prize still to collect."""
    if spec.C:
        return float(state.remaining_load)
    if spec.orienteering:
        return (spec.op_max_length - state.route_used) / spec.op_max_length
    if spec.PC:
        target = spec.pc_min_prize if pc_threshold is None else pc_threshold
        return max(target - state.collected_prize, 0.0)
    return 0.0


class Policy:
    """Parameters plus configuration; the unit trained, checkpointed and decoded."""

    def __init__(self, cfg: ModelConfig, params: Optional[dict] = None, seed=0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def encode(self, instances, seeds) -> EncodedBatch:
        return encode(instances, seeds, self.params, self.cfg)

    def save(self, path: str, meta: Optional[dict] = None):
        info = {"model": asdict(self.cfg)}
        info.update(meta or {})
        tn.save_checkpoint(path, param_arrays(self.params), info)

    @classmethod
    def load(cls, path: str) -> "Policy":
        arrays, meta = tn.load_checkpoint(path)
        cfg = ModelConfig(**meta["model"])
        return cls(cfg, params_from_arrays(arrays))
