"""Synthetic structural causal benchmark with environment shifts.

Causal structure, per time step t with environment e(t):

    X_I(t)     latent AR(1) invariant driver, unit marginal variance
    X_I_obs(t) = X_I(t) + obs_noise * noise            (observed columns xi_*)
    Y_suf(t)   = sum_j <a_j, g(X_I(t - lag_offset - j))> + noise_std * noise
    X_V(t)     = W_e @ h_V(X_I(t)) + var_noise * noise  (observed columns xv_*)
    Y(t)       = alpha_b * Y_suf(t) + beta_b            (observed column y)

``alpha_b, beta_b`` are constant over consecutive blocks of ``z_block`` steps
and play the role of an unobserved variable acting on the target. The X_V
columns carry information about X_I only through an environment-specific
mechanism, so a model leaning on them breaks when W_e changes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import RawSeries, SplitSpec
from .errors import ConfigError
from .nn import make_rng


@dataclass
class ScmSpec:
    n_envs: int = 2
    length: int = 4000
    d_inv: int = 3
    d_var: int = 3
    segment_length: int = 500
    # explicit [[env, length], ...]; overrides segment_length when given
    layout: Optional[List[List[int]]] = None
    ar_coef: float = 0.8
    n_lags: int = 4
    lag_offset: int = 12
    mechanism: str = "linear"  # g: linear | tanh
    var_transform: str = "identity"  # h_V: identity | tanh
    inv_weights: Optional[List[List[float]]] = None  # (n_lags, d_inv)
    var_weights: Optional[List[List[List[float]]]] = None  # (n_envs, d_var, d_inv)
    var_noise: float = 0.1
    obs_noise: float = 0.5
    noise_std: float = 0.1
    z_block: int = 12
    alpha_range: Tuple[float, float] = (0.6, 1.4)
    beta_range: Tuple[float, float] = (-0.5, 0.5)
    alpha_min: float = 0.1
    # optional shifted-Z test region: final fraction of time with its own ranges
    test_fraction: float = 0.0
    test_alpha_range: Optional[Tuple[float, float]] = None
    test_beta_range: Optional[Tuple[float, float]] = None
    # shifts beta by ez_coupling * (env offset in [-1, 1]); 0 disables
    ez_coupling: float = 0.0
    seed: int = 0

    def segments(self) -> List[Tuple[int, int, int]]:
        """``(start, stop, env)`` triples covering ``[0, length)``."""
        if self.layout is not None:
            segs, pos = [], 0
            for env, n in self.layout:
                segs.append((pos, pos + int(n), int(env)))
                pos += int(n)
            return segs
        segs, pos, e = [], 0, 0
        while pos < self.length:
            stop = min(pos + self.segment_length, self.length)
            segs.append((pos, stop, e))
            pos, e = stop, (e + 1) % self.n_envs
        return segs

    def validate(self) -> None:
        if self.n_envs < 2 and self.layout is None:
            raise ConfigError("n_envs must be >= 2")
        if self.length < 1 or self.d_inv < 1 or self.d_var < 0 or self.segment_length < 1:
            raise ConfigError("length, d_inv, segment_length must be positive and d_var >= 0")
        segs = self.segments()
        if segs[0][0] != 0 or segs[-1][1] != self.length or any(
            a[1] != b[0] for a, b in zip(segs, segs[1:])
        ) or any(s[1] <= s[0] for s in segs):
            raise ConfigError(f"segment layout does not cover [0, {self.length}) exactly")
        if any(not 0 <= s[2] < self.n_envs for s in segs):
            raise ConfigError("layout references an environment outside [0, n_envs)")
        if self.mechanism not in ("linear", "tanh") or self.var_transform not in ("identity", "tanh"):
            raise ConfigError("mechanism must be linear|tanh and var_transform identity|tanh")
        if not -1.0 < self.ar_coef < 1.0:
            raise ConfigError("ar_coef must lie in (-1, 1)")
        if self.z_block < 1 or self.n_lags < 1 or self.lag_offset < 0:
            raise ConfigError("z_block and n_lags must be >= 1, lag_offset >= 0")
        for name in ("alpha_range", "test_alpha_range"):
            rng = getattr(self, name)
            if rng is not None and (rng[0] > rng[1] or (rng[0] < self.alpha_min and rng[1] > -self.alpha_min)):
                raise ConfigError(f"{name} must be ordered and keep |alpha| >= alpha_min={self.alpha_min}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")
        w = self.resolved_var_weights()
        for i in range(self.n_envs):
            for j in range(i + 1, self.n_envs):
                if self.d_var and np.allclose(w[i], w[j]):
                    raise ConfigError(f"spurious weights of environments {i} and {j} coincide")

    def resolved_var_weights(self) -> np.ndarray:
        if self.var_weights is not None:
            w = np.asarray(self.var_weights, dtype=np.float64)
            if w.shape != (self.n_envs, self.d_var, self.d_inv):
                raise ConfigError(f"var_weights must have shape {(self.n_envs, self.d_var, self.d_inv)}")
            return w
        # env e scales an identity-like map by cos(pi e / (K-1)): K=2 gives +1/-1
        base = np.eye(self.d_var, self.d_inv)
        k = max(self.n_envs - 1, 1)
        return np.stack([np.cos(np.pi * e / k) * base for e in range(self.n_envs)])

    def resolved_inv_weights(self) -> np.ndarray:
        if self.inv_weights is not None:
            a = np.asarray(self.inv_weights, dtype=np.float64)
            if a.shape != (self.n_lags, self.d_inv):
                raise ConfigError(f"inv_weights must have shape {(self.n_lags, self.d_inv)}")
            return a
        a = make_rng(self.seed + 1_000_003).normal(size=(self.n_lags, self.d_inv))
        return a / np.sqrt(a.size)


@dataclass
class ScmTruth:
    labels: np.ndarray  # (T,) environment per time step
    blocks: List[dict]  # {"start", "stop", "alpha", "beta"}
    y_suf: np.ndarray  # (T,)
    x_inv: np.ndarray  # (T, d_inv) latent invariant driver
    segments: List[Tuple[int, int, int]] = field(default_factory=list)
    test_start: Optional[int] = None  # start of the shifted-Z region, if any

    def to_json(self) -> dict:
        return {
            "schema": "foil-scm-truth/1",
            "labels": self.labels.tolist(),
            "blocks": self.blocks,
            "y_suf": self.y_suf.tolist(),
            "x_inv": self.x_inv.tolist(),
            "segments": [list(s) for s in self.segments],
            "test_start": self.test_start,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ScmTruth":
        return cls(
            np.asarray(d["labels"], dtype=np.int64),
            d["blocks"],
            np.asarray(d["y_suf"]),
            np.asarray(d["x_inv"]),
            [tuple(s) for s in d["segments"]],
            d.get("test_start"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ScmTruth":
        return cls.from_json(json.loads(Path(path).read_text()))


def _inv_map(name, x):
    return x if name in ("linear", "identity") else np.tanh(x)


def generate(spec: ScmSpec):
    """Sample one series. Returns ``(RawSeries, ScmTruth)``."""
    spec.validate()
    rng = make_rng(spec.seed)
    T, dI, dV = spec.length, spec.d_inv, spec.d_var
    burn = spec.lag_offset + spec.n_lags + 50
    n = T + burn

    # each stream gets its own draw so changing one knob keeps the others fixed
    innov = rng.normal(size=(n, dI))
    obs = rng.normal(size=(T, dI))
    var_eps = rng.normal(size=(T, dV))
    y_eps = rng.normal(size=T)
    z_u = rng.uniform(size=(T // spec.z_block + 1, 2))

    x = np.zeros((n, dI))
    x[0] = innov[0]
    scale = np.sqrt(1.0 - spec.ar_coef**2)
    for t in range(1, n):
        x[t] = spec.ar_coef * x[t - 1] + scale * innov[t]

    a = spec.resolved_inv_weights()
    gx = _inv_map(spec.mechanism, x)
    y_suf = np.zeros(T)
    for j in range(spec.n_lags):
        lagged = gx[burn - spec.lag_offset - j : n - spec.lag_offset - j]
        y_suf += lagged @ a[j]
    y_suf += spec.noise_std * y_eps

    x_lat = x[burn:]
    segs = spec.segments()
    labels = np.empty(T, dtype=np.int64)
    for start, stop, e in segs:
        labels[start:stop] = e
    w = spec.resolved_var_weights()
    hv = _inv_map(spec.var_transform, x_lat)
    x_var = np.einsum("tij,tj->ti", w[labels], hv) + spec.var_noise * var_eps if dV else np.zeros((T, 0))

    test_start = None
    if spec.test_fraction > 0:
        test_start = int(round(T * (1.0 - spec.test_fraction)))
    env_offset = np.linspace(-1.0, 1.0, spec.n_envs) if spec.n_envs > 1 else np.zeros(1)
    blocks, y = [], np.empty(T)
    for b, start in enumerate(range(0, T, spec.z_block)):
        stop = min(start + spec.z_block, T)
        shifted = test_start is not None and start >= test_start
        ar = spec.test_alpha_range if shifted and spec.test_alpha_range else spec.alpha_range
        br = spec.test_beta_range if shifted and spec.test_beta_range else spec.beta_range
        alpha = ar[0] + (ar[1] - ar[0]) * z_u[b, 0]
        beta = br[0] + (br[1] - br[0]) * z_u[b, 1]
        if spec.ez_coupling:
            beta += spec.ez_coupling * env_offset[labels[start]]
        y[start:stop] = alpha * y_suf[start:stop] + beta
        blocks.append({"start": start, "stop": stop, "alpha": float(alpha), "beta": float(beta)})

    x_obs = x_lat + spec.obs_noise * obs
    values = np.column_stack([x_obs, x_var, y])
    columns = tuple([f"xi_{i}" for i in range(dI)] + [f"xv_{i}" for i in range(dV)] + ["y"])
    series = RawSeries(values, values.shape[1] - 1, columns)
    truth = ScmTruth(labels, blocks, y_suf, x_lat, segs, test_start)
    return series, truth


OOD_PROTOCOLS = ("held-out-environment", "shifted-z")


def ood_split(series: RawSeries, truth: ScmTruth, protocol: str, val_fraction: float = 0.1) -> SplitSpec:
    """Chronological split whose test region differs from training by construction.

    ``held-out-environment``: the environment of the final segment must not
    occur anywhere earlier; its region becomes the test split.
    ``shifted-z``: the region generated with shifted alpha/beta ranges is the
    test split. ``val_fraction`` of the remaining rows (the latest ones) form
    the validation split.
    """
    T = series.length
    if protocol == "held-out-environment":
        envs = np.unique(truth.labels)
        if len(envs) < 2:
            raise ConfigError("held-out-environment needs at least two environments")
        last = truth.labels[-1]
        idx = np.flatnonzero(truth.labels != last)
        test_start = int(idx[-1]) + 1
        if np.any(truth.labels[:test_start] == last):
            raise ConfigError(f"environment {last} also occurs before its final region")
        if len(np.unique(truth.labels[:test_start])) < 1:
            raise ConfigError("no training environments left")
    elif protocol == "shifted-z":
        if truth.test_start is None:
            raise ConfigError("shifted-z needs a spec with test_fraction > 0 and shifted ranges")
        test_start = truth.test_start
    else:
        raise ConfigError(f"unknown OOD protocol {protocol!r}; expected one of {OOD_PROTOCOLS}")
    train_end = int(round(test_start * (1.0 - val_fraction)))
    return SplitSpec(train_end, test_start, T)


def preset(name: str, seed: int = 0) -> ScmSpec:
    """Named benchmark configurations.

    ``default``: two alternating environments with sign-flipped spurious
    mechanisms. ``heldout``: environments 0 and 1 alternate over the first
    80% of time and environment 2 occupies the last 20%. Environment 0 is
    given more time than environment 1 so that a pooled fit does not average
    the spurious mechanism away, and environment 2 reverses and amplifies it.
    """
    if name == "default":
        return ScmSpec(seed=seed)
    if name == "heldout":
        return ScmSpec(
            n_envs=3,
            layout=[[0, 1100], [1, 500], [0, 1100], [1, 500], [2, 800]],
            var_weights=[(w * np.eye(3)).tolist() for w in (1.0, -1.0, -1.5)],
            seed=seed,
        )
    raise ConfigError(f"unknown SCM preset {name!r}")


def spec_to_dict(spec: ScmSpec) -> dict:
    d = asdict(spec)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d
