"""Feature extractor, residual-action actor, and Siamese policy networks.

All three are pure functions of a :class:`ParameterSet`; traced variants
record the forward pass so reverse-mode gradients can be taken, and the
``*_apply`` variants run the identical arithmetic trace-free for inference
and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Var


@dataclass
class NetworkConfig:
    """Structural hyperparameters shared by the actor and policy networks."""

    in_channels: int = 1
    feature_channels: int = 32
    n_fe: int = 3
    n_rb: int = 3
    n_tb: int = 3
    n_policy_blocks: int = 3
    kernel_size: int = 3
    residual_scale: float = 0.1
    leaky_slope: float = 0.1

    def validate(self):
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 < self.residual_scale <= 1.0:
            raise ValueError(f"residual_scale must be in (0, 1], got {self.residual_scale}")
        if self.leaky_slope < 0:
            raise ValueError(f"leaky_slope must be >= 0, got {self.leaky_slope}")
        for name in ("in_channels", "feature_channels", "n_fe", "n_rb", "n_tb",
                     "n_policy_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        return self


def _conv_names(prefix):
    return f"{prefix}.w", f"{prefix}.b"


@dataclass
class ParameterSet:
    """Named kernels/biases partitioned into feature+actor and policy groups.

    The policy kernels are a single set used by both Siamese branches; the
    scalar score offset lives under ``pol.bias``.  ``theta_fa`` and
    ``theta_p`` are disjoint and together cover every trainable value.
    """

    config: NetworkConfig
    values: dict = field(default_factory=dict)

    POLICY_BIAS = "pol.bias"

    @property
    def theta_f(self):
        return [n for n in self.values if n.startswith("fe")]

    @property
    def theta_a(self):
        return [n for n in self.values if n.startswith(("rb", "tb"))]

    @property
    def theta_fa(self):
        return self.theta_f + self.theta_a

    @property
    def theta_p(self):
        return [n for n in self.values if n.startswith("pol")]

    def subset(self, names):
        return {n: self.values[n] for n in names}

    def copy(self):
        return ParameterSet(self.config, {n: v.copy() for n, v in self.values.items()})

    def block_shapes(self):
        """Canonical (name -> shape) map for the current config."""
        cfg = self.config
        k, c, cf = cfg.kernel_size, cfg.in_channels, cfg.feature_channels
        shapes = {}

        def conv(prefix, cin, cout):
            w, b = _conv_names(prefix)
            shapes[w] = (k, k, cin, cout)
            shapes[b] = (cout,)

        for i in range(cfg.n_fe):
            conv(f"fe{i}", c if i == 0 else cf, cf)
        for i in range(cfg.n_rb):
            conv(f"rb{i}.c1", cf, cf)
            conv(f"rb{i}.c2", cf, cf)
        for i in range(cfg.n_tb):
            conv(f"tb{i}", cf, cf if i < cfg.n_tb - 1 else c)
        for i in range(cfg.n_policy_blocks):
            conv(f"pol{i}", c if i == 0 else cf, cf)
        shapes[self.POLICY_BIAS] = ()
        return shapes


def init_parameters(config: NetworkConfig, seed: int) -> ParameterSet:
    """Xavier-uniform kernels, zero biases, deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = ParameterSet(config)
    for name, shape in params.block_shapes().items():
        if len(shape) == 4:
            kh, kw, cin, cout = shape
            limit = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
            params.values[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params.values[name] = np.zeros(shape)
    return params


def _pvars(params: ParameterSet, names):
    return {n: Var(params.values[n]) for n in names}


def _check_state(s, channels, what="state"):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim not in (3, 4) or s.shape[-1] != channels:
        raise ShapeError(f"{what} must have shape (..,H,W,{channels}), got {s.shape}")
    return s


# ---------------------------------------------------------------------------
# feature extractor
# ---------------------------------------------------------------------------

def _fe_graph(x, pv, config):
    for i in range(config.n_fe):
        w, b = _conv_names(f"fe{i}")
        x = ad.leaky_relu(ad.conv2d(x, pv[w], pv[b]), config.leaky_slope)
    return x


def feature_extract(s, params: ParameterSet):
    """Map a state (H,W,C) to its latent representation (H,W,feature_channels)."""
    cfg = params.config
    s = _check_state(s, cfg.in_channels)
    x = s
    for i in range(cfg.n_fe):
        w, b = _conv_names(f"fe{i}")
        x = ad.leaky_relu_raw(ad.conv2d_raw(x, params.values[w], params.values[b]),
                              cfg.leaky_slope)
    return x


# ---------------------------------------------------------------------------
# actor
# ---------------------------------------------------------------------------

def _rb_graph(x, pv, prefix, config):
    w1, b1 = _conv_names(f"{prefix}.c1")
    w2, b2 = _conv_names(f"{prefix}.c2")
    h = ad.conv2d(ad.leaky_relu(ad.conv2d(x, pv[w1], pv[b1]), 0.0), pv[w2], pv[b2])
    return ad.add(x, ad.scale(h, config.residual_scale))


def residual_block(x, block_params, residual_scale):
    """x + scale*h(x) with h = conv(relu(conv(x))); preserves shape."""
    w1, b1, w2, b2 = block_params
    h = ad.conv2d_raw(ad.leaky_relu_raw(ad.conv2d_raw(x, w1, b1), 0.0), w2, b2)
    return x + residual_scale * h


@dataclass
class ActorTrace:
    """Recorded actor pass: latent sequence, arrived state, and the graph root."""

    latents: list
    arrived: np.ndarray
    output: Var
    param_vars: dict


def actor_forward(s, params: ParameterSet) -> ActorTrace:
    """Full actor pass with the trace retained for gradient propagation."""
    cfg = params.config
    s = _check_state(s, cfg.in_channels)
    pv = _pvars(params, params.theta_fa)
    latents = []
    x = _fe_graph(Var(s, needs_grad=False), pv, cfg)
    latents.append(x.data)
    for i in range(cfg.n_rb):
        x = _rb_graph(x, pv, f"rb{i}", cfg)
        latents.append(x.data)
    for i in range(cfg.n_tb):
        w, b = _conv_names(f"tb{i}")
        x = ad.conv2d(x, pv[w], pv[b])
        if i < cfg.n_tb - 1:
            x = ad.leaky_relu(x, cfg.leaky_slope)
    return ActorTrace(latents, x.data, x, pv)


def actor_apply(s, params: ParameterSet):
    """Trace-free actor pass; bit-identical to ``actor_forward(...).arrived``."""
    cfg = params.config
    s = _check_state(s, cfg.in_channels)
    vals = params.values
    x = s
    for i in range(cfg.n_fe):
        w, b = _conv_names(f"fe{i}")
        x = ad.leaky_relu_raw(ad.conv2d_raw(x, vals[w], vals[b]), cfg.leaky_slope)
    for i in range(cfg.n_rb):
        w1, b1 = _conv_names(f"rb{i}.c1")
        w2, b2 = _conv_names(f"rb{i}.c2")
        x = residual_block(x, (vals[w1], vals[b1], vals[w2], vals[b2]), cfg.residual_scale)
    for i in range(cfg.n_tb):
        w, b = _conv_names(f"tb{i}")
        x = ad.conv2d_raw(x, vals[w], vals[b])
        if i < cfg.n_tb - 1:
            x = ad.leaky_relu_raw(x, cfg.leaky_slope)
    return x


# ---------------------------------------------------------------------------
# Siamese policy
# ---------------------------------------------------------------------------

def _policy_branch(x, pv, config):
    for i in range(config.n_policy_blocks):
        w, b = _conv_names(f"pol{i}")
        x = ad.leaky_relu(ad.conv2d(x, pv[w], pv[b]), config.leaky_slope)
    return x


@dataclass
class PolicyTrace:
    """Recorded Siamese pass: score, confidence, and its log, per pair."""

    score: Var
    log_pi: Var
    pi: np.ndarray
    param_vars: dict


def policy_graph(s_hat, s_star, params: ParameterSet) -> PolicyTrace:
    """Siamese score graph over one pair or a batch of pairs.

    Both branches share the same parameter nodes, so branch gradients
    accumulate into a single set of policy kernels.  Inputs are taken as
    constants: no gradient flows back into whatever produced ``s_hat``.
    """
    cfg = params.config
    s_hat = _check_state(s_hat, cfg.in_channels, "arrived state")
    s_star = _check_state(s_star, cfg.in_channels, "goal state")
    if s_hat.shape != s_star.shape:
        raise ShapeError(f"state shape mismatch: {s_hat.shape} vs {s_star.shape}")
    pv = _pvars(params, params.theta_p)
    fa = _policy_branch(Var(s_hat, needs_grad=False), pv, cfg)
    fb = _policy_branch(Var(s_star, needs_grad=False), pv, cfg)
    score = ad.add_bias(ad.inner_product(fa, fb), pv[ParameterSet.POLICY_BIAS])
    log_pi = ad.log_sigmoid(score)
    pi = ad.sigmoid_raw(score.data)
    return PolicyTrace(score, log_pi, np.asarray(pi), pv)


def siamese_score(s_hat, s_star, params: ParameterSet):
    """Correlation of the two branch feature maps plus the scalar offset."""
    cfg = params.config
    s_hat = _check_state(s_hat, cfg.in_channels, "arrived state")
    s_star = _check_state(s_star, cfg.in_channels, "goal state")
    if s_hat.shape != s_star.shape:
        raise ShapeError(f"state shape mismatch: {s_hat.shape} vs {s_star.shape}")
    vals = params.values

    def branch(x):
        for i in range(cfg.n_policy_blocks):
            w, b = _conv_names(f"pol{i}")
            x = ad.leaky_relu_raw(ad.conv2d_raw(x, vals[w], vals[b]), cfg.leaky_slope)
        return x

    corr = ad.inner_product_raw(branch(s_hat), branch(s_star))
    return corr + float(vals[ParameterSet.POLICY_BIAS])


def policy_prob(s_hat, s_star, params: ParameterSet):
    """Confidence that the arrived state matches the goal, strictly in (0,1)."""
    return ad.sigmoid_raw(siamese_score(s_hat, s_star, params))
