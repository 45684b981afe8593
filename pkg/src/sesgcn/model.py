"""Graph-convolutional encoder variants, temporal-convolutional decoder, full model.

Tensors flowing through the encoder use the layout ``[N, C, V, T]`` (batch,
channels, joints, frames). Layer functions also accept an unbatched
``[C, V, T]`` tensor and return the matching unbatched result.

Encoder variants:

* ``vanilla``  - one dense ``VT x VT`` adjacency per layer.
* ``sts``      - adjacency factored into ``A_s [V, V, T]`` and ``A_t [T, T, V]``.
* ``sts_dw``   - factored adjacency plus depth-wise (grouped) and pointwise weights.
* ``ses``      - ``sts_dw`` with frozen binary masks on both adjacency factors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractViolation
from .numerics import DiffTensor

VARIANTS = ("vanilla", "sts", "sts_dw", "ses")
ANCHORS = ("none", "root", "last_pose")
DEFAULT_WIDTH = 64


@dataclass(frozen=True)
class ModelConfig:
    V: int = 15
    T: int = 10
    K: int = 25
    C_hidden: tuple[int, ...] | None = None
    n_gcn_layers: int = 5
    n_tcn_layers: int = 4
    # Number of depth-wise groups in hidden layers; None means one group per channel.
    alpha: int | None = None
    variant: str = "ses"
    tcn_kernel: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    prelu_init: float = 0.25
    # Millimetres per internal unit; inputs are divided by it, outputs multiplied.
    input_scale: float = 10.0
    # Reference subtracted from the input and added back to the forecast:
    # "none", "root" (last observed position of joint 0) or "last_pose"
    # (each joint's last observed position).
    anchor: str = "last_pose"

    def __post_init__(self):
        if self.C_hidden is None:
            object.__setattr__(self, "C_hidden", (3,) + (DEFAULT_WIDTH,) * self.n_gcn_layers)
        else:
            object.__setattr__(self, "C_hidden", tuple(int(c) for c in self.C_hidden))
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_gcn_layers < 1:
            raise ConfigError("n_gcn_layers must be >= 1")
        if self.n_tcn_layers < 1:
            raise ConfigError("n_tcn_layers must be >= 1")
        if self.V < 1 or self.T < 2 or self.K < 1:
            raise ConfigError(f"need V >= 1, T >= 2, K >= 1 (got V={self.V}, T={self.T}, K={self.K})")
        if len(self.C_hidden) != self.n_gcn_layers + 1:
            raise ConfigError(
                f"C_hidden needs n_gcn_layers + 1 = {self.n_gcn_layers + 1} entries, got {len(self.C_hidden)}"
            )
        if self.C_hidden[0] != 3:
            raise ConfigError("C_hidden[0] must be 3 (xyz coordinates)")
        if min(self.C_hidden) < 1:
            raise ConfigError("channel widths must be positive")
        if self.tcn_kernel < 1 or self.tcn_kernel % 2 == 0:
            raise ConfigError(f"tcn_kernel must be a positive odd integer, got {self.tcn_kernel}")
        if self.n_tcn_layers > 1 and self.tcn_kernel > self.K:
            raise ConfigError(f"tcn_kernel {self.tcn_kernel} is wider than the forecast length K={self.K}")
        if self.alpha is not None and self.variant in ("sts_dw", "ses"):
            if self.alpha < 1:
                raise ConfigError("alpha must be >= 1")
            for c in self.C_hidden[1:-1]:
                if c % self.alpha:
                    raise ConfigError(f"alpha={self.alpha} does not divide channel width {c}")
        if self.input_scale <= 0:
            raise ConfigError("input_scale must be positive")
        if self.anchor not in ANCHORS:
            raise ConfigError(f"anchor must be one of {ANCHORS}, got {self.anchor!r}")

    def groups(self, layer: int) -> int:
        # The xyz input layer is always one group per channel; alpha applies to hidden widths.
        if self.alpha is None or layer == 0:
            return self.C_hidden[layer]
        return self.alpha

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        if "n_gcn_layers" in changes and "C_hidden" not in changes:
            d["C_hidden"] = None
        d.update(changes)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["C_hidden"] = list(self.C_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ParameterCount:
    adjacency: int
    weights: int
    masked_out: int
    total: int
    adjacency_per_layer: tuple[int, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "adjacency": self.adjacency,
            "weights": self.weights,
            "masked_out": self.masked_out,
            "total": self.total,
            "adjacency_per_layer": list(self.adjacency_per_layer),
        }


# ---------------------------------------------------------------------------
# layer functions
#
# Public layer functions take ``[C, V, T]`` or ``[N, C, V, T]``. Internally the
# model works channels-last in a joint-major layout ``[V, T, N, C]`` so the
# adjacency products are plain batched matrix products and per-channel maps
# are single GEMMs over a ``[V*T*N, C]`` view.


def _to_internal(X) -> tuple[DiffTensor, bool]:
    X = nx.as_tensor(X)
    if X.ndim == 3:
        X, squeeze = nx.reshape(X, (1,) + X.shape), True
    elif X.ndim == 4:
        squeeze = False
    else:
        raise ContractViolation(f"expected [C,V,T] or [N,C,V,T], got {X.shape}")
    return nx.transpose(X, (2, 3, 0, 1)), squeeze


def _from_internal(Y: DiffTensor, squeeze: bool) -> DiffTensor:
    Y = nx.transpose(Y, (2, 3, 0, 1))
    return nx.reshape(Y, Y.shape[1:]) if squeeze else Y


def _slope(slope, c: int) -> DiffTensor:
    return DiffTensor(np.full(c, 0.25)) if slope is None else nx.as_tensor(slope)


def _channel_mix(X: DiffTensor, W, b=None) -> DiffTensor:
    """1x1 map over the last axis with ``W [C', C]``."""
    W = nx.as_tensor(W)
    C = X.shape[-1]
    if W.ndim != 2 or W.shape[1] != C:
        raise ContractViolation(f"channel weights {W.shape} do not match {C} input channels of {X.shape}")
    Y = nx.matmul(nx.reshape(X, (-1, C)), nx.transpose(W, (1, 0)))
    if b is not None:
        Y = nx.add(Y, b)
    return nx.reshape(Y, X.shape[:-1] + (W.shape[0],))


def _full_mix(X: DiffTensor, A) -> DiffTensor:
    A = nx.as_tensor(A)
    V, T, N, C = X.shape
    if A.shape != (V * T, V * T):
        raise ContractViolation(f"adjacency {A.shape} does not match V*T={V * T} (V={V}, T={T})")
    return nx.reshape(nx.matmul(A, nx.reshape(X, (V * T, N * C))), X.shape)


def _space_time_mix(X: DiffTensor, A_s, A_t) -> DiffTensor:
    """Frames mixed per joint by ``A_t``, then joints mixed per frame by ``A_s``."""
    A_s, A_t = nx.as_tensor(A_s), nx.as_tensor(A_t)
    V, T, N, C = X.shape
    if A_s.shape != (V, V, T):
        raise ContractViolation(f"A_s has shape {A_s.shape}, expected {(V, V, T)} for V={V}, T={T}")
    if A_t.shape != (T, T, V):
        raise ContractViolation(f"A_t has shape {A_t.shape}, expected {(T, T, V)} for V={V}, T={T}")
    # Y[v, t] = sum_s A_t[t, s, v] X[v, s]
    Y = nx.matmul(nx.transpose(A_t, (2, 0, 1)), nx.reshape(X, (V, T, N * C)))
    # Z[v, t] = sum_u A_s[v, u, t] Y[u, t]
    Z = nx.matmul(nx.transpose(A_s, (2, 0, 1)), nx.transpose(Y, (1, 0, 2)))
    return nx.reshape(nx.transpose(Z, (1, 0, 2)), X.shape)


def _depthwise(X: DiffTensor, W_dw, b_dw=None) -> DiffTensor:
    W_dw = nx.as_tensor(W_dw)
    C = X.shape[-1]
    if W_dw.ndim != 2 or W_dw.shape[0] != C or C % W_dw.shape[1]:
        raise ContractViolation(f"depth-wise weights {W_dw.shape} do not fit {C} channels")
    gs = W_dw.shape[1]
    if gs == 1:
        Y = nx.mul(X, nx.reshape(W_dw, (C,)))
    else:
        groups = C // gs
        Xg = nx.reshape(X, (-1, groups, gs))
        Wg = nx.reshape(W_dw, (groups, gs, gs))
        Y = nx.reshape(nx.batched_contract("mgi,goi->mgo", Xg, Wg), X.shape)
    if b_dw is not None:
        Y = nx.add(Y, b_dw)
    return Y


def _check_alpha(C: int, W_dw, alpha: int | None) -> None:
    if alpha is None:
        return
    if alpha < 1 or C % alpha:
        raise ConfigError(f"alpha={alpha} does not divide channel count {C}")
    if nx.as_tensor(W_dw).shape != (C, C // alpha):
        raise ContractViolation(f"W_dw must be {(C, C // alpha)} for alpha={alpha}")


def _dw_block(X: DiffTensor, A_s, A_t, W_dw, W_mlp, b_dw, b_mlp, slope) -> DiffTensor:
    H = nx.relu6(_depthwise(_space_time_mix(X, A_s, A_t), W_dw, b_dw))
    Y = _channel_mix(H, W_mlp, b_mlp)
    return nx.prelu(Y, _slope(slope, Y.shape[-1]), axis=-1)


def expand_factors(A_s: np.ndarray, A_t: np.ndarray) -> np.ndarray:
    """Dense ``[V*T, V*T]`` adjacency equivalent to the factored pair.

    Row ``(v, t)``, column ``(u, s)`` holds ``A_s[v, u, t] * A_t[t, s, u]``.
    """
    V, _, T = A_s.shape
    full = np.einsum("vut,tsu->vtus", A_s, A_t)
    return full.reshape(V * T, V * T)


def gcn_layer_forward(X, A, W, b=None, slope=None) -> DiffTensor:
    """PReLU(A X W) with a dense joint-frame adjacency ``A [V*T, V*T]``."""
    Xi, squeeze = _to_internal(X)
    Y = _channel_mix(_full_mix(Xi, A), W, b)
    return _from_internal(nx.prelu(Y, _slope(slope, Y.shape[-1]), axis=-1), squeeze)


def space_time_mix(X, A_s, A_t) -> DiffTensor:
    """The factored adjacency product alone, in the public ``[.., C, V, T]`` layout."""
    Xi, squeeze = _to_internal(X)
    return _from_internal(_space_time_mix(Xi, A_s, A_t), squeeze)


def sts_layer_forward(X, A_s, A_t, W, b=None, slope=None) -> DiffTensor:
    Xi, squeeze = _to_internal(X)
    Y = _channel_mix(_space_time_mix(Xi, A_s, A_t), W, b)
    return _from_internal(nx.prelu(Y, _slope(slope, Y.shape[-1]), axis=-1), squeeze)


def dw_block_forward(X, A_s, A_t, W_dw, W_mlp, b_dw=None, b_mlp=None, slope=None, alpha=None) -> DiffTensor:
    """H = ReLU6(A_s A_t X W_dw); out = PReLU(H W_mlp).

    ``W_dw`` is ``[C, C / alpha]``: ``alpha`` groups of ``C / alpha`` channels each.
    """
    Xi, squeeze = _to_internal(X)
    _check_alpha(Xi.shape[-1], W_dw, alpha)
    return _from_internal(_dw_block(Xi, A_s, A_t, W_dw, W_mlp, b_dw, b_mlp, slope), squeeze)


def _check_mask(M, A: DiffTensor, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.shape != A.shape:
        raise ContractViolation(f"mask {name} shape {M.shape} differs from adjacency {A.shape}")
    if not np.isin(M, (0.0, 1.0)).all():
        raise ContractViolation(f"mask {name} has entries outside {{0, 1}}")
    return M


def ses_block_forward(X, A_s, A_t, M_s, M_t, W_dw, W_mlp, b_dw=None, b_mlp=None, slope=None, alpha=None) -> DiffTensor:
    """Depth-wise block on masked adjacency factors ``M_s * A_s`` and ``M_t * A_t``."""
    A_s, A_t = nx.as_tensor(A_s), nx.as_tensor(A_t)
    M_s = _check_mask(M_s, A_s, "M_s")
    M_t = _check_mask(M_t, A_t, "M_t")
    return dw_block_forward(
        X, nx.mul(A_s, M_s), nx.mul(A_t, M_t), W_dw, W_mlp, b_dw, b_mlp, slope, alpha
    )


# ---------------------------------------------------------------------------
# model


class SesGcnModel:
    """Parameters, buffers and masks for one encoder/decoder stack."""

    def __init__(self, config: ModelConfig, seed: int = 0, masks: Sequence[tuple[np.ndarray, np.ndarray]] | None = None):
        self.config = config
        self.seed = seed
        self.training = False
        self.params: dict[str, DiffTensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.masks: list[tuple[np.ndarray, np.ndarray]] | None = None
        self._build(np.random.default_rng(seed))
        if config.variant == "ses":
            if masks is None:
                masks = [(np.ones((config.V, config.V, config.T)), np.ones((config.T, config.T, config.V)))
                         for _ in range(config.n_gcn_layers)]
            self.set_masks(masks)
        elif masks is not None:
            raise ContractViolation(f"masks are only valid for the ses variant, not {config.variant!r}")

    # -- construction -----------------------------------------------------

    def _param(self, rng: np.random.Generator, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self.params[name] = DiffTensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)

    def _const(self, name: str, value: np.ndarray) -> None:
        self.params[name] = DiffTensor(value, requires_grad=True, name=name)

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        V, T, K = cfg.V, cfg.T, cfg.K
        for l in range(cfg.n_gcn_layers):
            cin, cout = cfg.C_hidden[l], cfg.C_hidden[l + 1]
            p = f"gcn{l}."
            if cfg.variant == "vanilla":
                self._param(rng, p + "A", (V * T, V * T), V * T)
            else:
                self._param(rng, p + "A_s", (V, V, T), V)
                self._param(rng, p + "A_t", (T, T, V), T)
            if cfg.variant in ("vanilla", "sts"):
                self._param(rng, p + "W", (cout, cin), cin)
                self._param(rng, p + "b", (cout,), cin)
            else:
                gs = cin // cfg.groups(l)
                self._param(rng, p + "W_dw", (cin, gs), gs)
                self._param(rng, p + "b_dw", (cin,), gs)
                self._param(rng, p + "W_mlp", (cout, cin), cin)
                self._param(rng, p + "b_mlp", (cout,), cin)
            self._const(p + "prelu", np.full(cout, cfg.prelu_init))
            self._const(p + "bn.gamma", np.ones(cout))
            self._const(p + "bn.beta", np.zeros(cout))
            self.buffers[p + "bn.running_mean"] = np.zeros(cout)
            self.buffers[p + "bn.running_var"] = np.ones(cout)
            if cin != cout:
                self._param(rng, p + "res.W", (cout, cin), cin)
                self._param(rng, p + "res.b", (cout,), cin)
        C = cfg.C_hidden[-1]
        k = cfg.tcn_kernel
        self._param(rng, "tcn.remap.W", (K, T), T)
        self._param(rng, "tcn.remap.b", (K,), T)
        for i in range(1, cfg.n_tcn_layers):
            self._const(f"tcn.prelu{i - 1}", np.full(C, cfg.prelu_init))
            self._param(rng, f"tcn.conv{i}.W", (k, C, C), k * C)
            self._param(rng, f"tcn.conv{i}.b", (C,), k * C)
        self._param(rng, "head.W", (3, C), C)
        self._param(rng, "head.b", (3,), C)

    # -- masks ------------------------------------------------------------

    def set_masks(self, masks: Sequence[tuple[np.ndarray, np.ndarray]]) -> None:
        """Freeze masked adjacency entries at zero and exclude them from optimisation."""
        cfg = self.config
        if cfg.variant != "ses":
            raise ContractViolation("masks require the ses variant")
        if len(masks) != cfg.n_gcn_layers:
            raise ContractViolation(f"got {len(masks)} mask pairs for {cfg.n_gcn_layers} layers")
        checked = []
        for l, (M_s, M_t) in enumerate(masks):
            A_s, A_t = self.params[f"gcn{l}.A_s"], self.params[f"gcn{l}.A_t"]
            M_s = _check_mask(M_s, A_s, f"gcn{l}.M_s")
            M_t = _check_mask(M_t, A_t, f"gcn{l}.M_t")
            for A, M in ((A_s, M_s), (A_t, M_t)):
                A.data *= M
                A.data[M == 0.0] = 0.0
                A.trainable_mask = M.astype(bool)
            checked.append((M_s, M_t))
        self.masks = checked

    # -- forward ----------------------------------------------------------

    def train(self) -> "SesGcnModel":
        self.training = True
        return self

    def eval(self) -> "SesGcnModel":
        self.training = False
        return self

    def _layer(self, l: int, X: DiffTensor, training: bool) -> DiffTensor:
        """One encoder block on internal-layout ``X``: BN(block(X)) + residual(X)."""
        cfg = self.config
        P = self.params
        p = f"gcn{l}."
        cin, cout = cfg.C_hidden[l], cfg.C_hidden[l + 1]
        if cfg.variant == "vanilla":
            Y = _channel_mix(_full_mix(X, P[p + "A"]), P[p + "W"], P[p + "b"])
            Y = nx.prelu(Y, P[p + "prelu"], axis=-1)
        elif cfg.variant == "sts":
            Y = _channel_mix(_space_time_mix(X, P[p + "A_s"], P[p + "A_t"]), P[p + "W"], P[p + "b"])
            Y = nx.prelu(Y, P[p + "prelu"], axis=-1)
        else:
            A_s, A_t = P[p + "A_s"], P[p + "A_t"]
            if cfg.variant == "ses":
                M_s, M_t = self.masks[l]
                A_s, A_t = nx.mul(A_s, M_s), nx.mul(A_t, M_t)
            Y = _dw_block(X, A_s, A_t, P[p + "W_dw"], P[p + "W_mlp"], P[p + "b_dw"], P[p + "b_mlp"], P[p + "prelu"])
        Y = nx.batch_norm(
            Y, P[p + "bn.gamma"], P[p + "bn.beta"],
            self.buffers[p + "bn.running_mean"], self.buffers[p + "bn.running_var"],
            axis=-1, momentum=cfg.bn_momentum, eps=cfg.bn_eps, training=training,
        )
        res = X if cin == cout else _channel_mix(X, P[p + "res.W"], P[p + "res.b"])
        return nx.add(Y, res)

    def _training(self, training: bool | None) -> bool:
        return self.training if training is None else training

    def forward(self, X_in, training: bool | None = None) -> DiffTensor:
        return model_forward(X_in, self, training)

    __call__ = forward

    # -- bookkeeping ------------------------------------------------------

    def parameters(self) -> list[DiffTensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        nx.zero_grad(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.params.items()}
        state.update({k: v.copy() for k, v in self.buffers.items()})
        if self.masks is not None:
            for l, (M_s, M_t) in enumerate(self.masks):
                state[f"gcn{l}.mask_s"] = M_s.copy()
                state[f"gcn{l}.mask_t"] = M_t.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ContractViolation(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        if self.masks is not None:
            self.set_masks([(state[f"gcn{l}.mask_s"], state[f"gcn{l}.mask_t"])
                            for l in range(self.config.n_gcn_layers)])
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ContractViolation(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data[...] = state[k]
        for k, b in self.buffers.items():
            b[...] = state[k]

    def save(self, path: str | Path) -> str:
        """Write ``path`` (binary arrays) and ``path.json`` (config); return the checkpoint sha256."""
        path = Path(path)
        digest = nx.save_checkpoint(path, self.state_dict())
        sidecar = {"variant": self.config.variant, "config": self.config.to_dict(), "seed": self.seed, "sha256": digest}
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")
        return digest

    def copy(self) -> "SesGcnModel":
        other = SesGcnModel(self.config, self.seed, masks=self.masks)
        other.load_state_dict(self.state_dict())
        return other


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_model(path: str | Path) -> SesGcnModel:
    path = Path(path)
    side = json.loads(sidecar_path(path).read_text())
    cfg = ModelConfig.from_dict(side["config"])
    state = nx.load_checkpoint(path)
    masks = None
    if cfg.variant == "ses":
        masks = [(state[f"gcn{l}.mask_s"], state[f"gcn{l}.mask_t"]) for l in range(cfg.n_gcn_layers)]
    model = SesGcnModel(cfg, seed=int(side.get("seed", 0)), masks=masks)
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# full passes


def _encode(X: DiffTensor, model: SesGcnModel, training: bool) -> DiffTensor:
    for l in range(model.config.n_gcn_layers):
        X = model._layer(l, X, training)
    return X


def _decode(X: DiffTensor, model: SesGcnModel) -> DiffTensor:
    """Internal ``[V, T, N, C]`` to ``[V, K, N, 3]``."""
    cfg = model.config
    P = model.params
    V, T, N, C = X.shape
    X = nx.matmul(P["tcn.remap.W"], nx.reshape(X, (V, T, N * C)))
    X = nx.add(X, nx.reshape(P["tcn.remap.b"], (-1, 1)))
    X = nx.reshape(X, (V, cfg.K, N, C))
    for i in range(1, cfg.n_tcn_layers):
        X = nx.prelu(X, P[f"tcn.prelu{i - 1}"], axis=-1)
        X = nx.conv_time(X, P[f"tcn.conv{i}.W"], P[f"tcn.conv{i}.b"], axis=1)
    return _channel_mix(X, P["head.W"], P["head.b"])


def _check_input(X: DiffTensor, model: SesGcnModel) -> None:
    cfg = model.config
    if X.shape[1:] != (3, cfg.V, cfg.T):
        raise ContractViolation(f"input {X.shape} does not match [N, 3, {cfg.V}, {cfg.T}]")


def encoder_forward(X_in, model: SesGcnModel, training: bool | None = None) -> DiffTensor:
    """Stack of encoder blocks, each followed by batch norm plus a residual path.

    ``[N, 3, V, T] -> [N, C_last, V, T]`` (or unbatched ``[3, V, T] -> [C_last, V, T]``).
    """
    X, squeeze = _to_internal(X_in)
    _check_input(_from_internal(X, False), model)
    return _from_internal(_encode(X, model, model._training(training)), squeeze)


def tcn_decode(H, model: SesGcnModel) -> DiffTensor:
    """Remap T observed frames to K forecast frames, refine, and project to xyz.

    ``[N, C, V, T] -> [N, 3, V, K]``.
    """
    X, squeeze = _to_internal(H)
    return _from_internal(_decode(X, model), squeeze)


def model_forward(X_in, model: SesGcnModel, training: bool | None = None) -> DiffTensor:
    """Millimetre input ``[N, 3, V, T]`` to millimetre forecast ``[N, 3, V, K]``."""
    X = nx.as_tensor(X_in)
    squeeze = X.ndim == 3
    if squeeze:
        X = nx.reshape(X, (1,) + X.shape)
    _check_input(X, model)
    cfg = model.config
    ref = _anchor(X.data, cfg.anchor)
    if ref is not None:
        X = nx.sub(X, ref)
    X = nx.transpose(nx.scale(X, 1.0 / cfg.input_scale), (2, 3, 0, 1))
    Y = nx.scale(_decode(_encode(X, model, model._training(training)), model), cfg.input_scale)
    Y = _from_internal(Y, False)
    if ref is not None:
        Y = nx.add(Y, ref)
    return nx.reshape(Y, Y.shape[1:]) if squeeze else Y


def _anchor(x: np.ndarray, mode: str) -> np.ndarray | None:
    """Per-example reference point(s) from ``[N, 3, V, T]`` input, broadcastable over time."""
    if mode == "root":
        return x[:, :, :1, -1:].copy()
    if mode == "last_pose":
        return x[:, :, :, -1:].copy()
    return None


def predict(model: SesGcnModel, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forecast from ``[N, T, V, 3]`` (or ``[T, V, 3]``) millimetre poses to ``[N, K, V, 3]``.

    Runs in eval mode without recording a tape; leaves the model's mode unchanged.
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = []
    with nx.no_grad():
        for i in range(0, len(x), batch_size):
            chunk = np.ascontiguousarray(x[i : i + batch_size].transpose(0, 3, 2, 1))
            y = model_forward(chunk, model, training=False).data
            out.append(y.transpose(0, 3, 2, 1))
    res = np.concatenate(out) if out else np.zeros((0, model.config.K, model.config.V, 3))
    return res[0] if single else res


def count_parameters(model: SesGcnModel) -> ParameterCount:
    """Learnable scalars; masked adjacency entries are constants and not counted."""
    adjacency = 0
    masked = 0
    per_layer = []
    weights = 0
    for name, p in model.params.items():
        is_adj = name.split(".")[-1] in ("A", "A_s", "A_t")
        if is_adj:
            live = int(p.trainable_mask.sum()) if p.trainable_mask is not None else p.size
            masked += p.size - live
            adjacency += live
        else:
            weights += p.size
    for l in range(model.config.n_gcn_layers):
        n = 0
        for key in ("A", "A_s", "A_t"):
            p = model.params.get(f"gcn{l}.{key}")
            if p is not None:
                n += int(p.trainable_mask.sum()) if p.trainable_mask is not None else p.size
        per_layer.append(n)
    return ParameterCount(adjacency, weights, masked, adjacency + weights, tuple(per_layer))
