"""Alternating invariant-learning trainer and the plain ERM control arm."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import WindowArrays, revin_denormalize, revin_normalize
from .envinfer import EmConfig, EnvironmentAssignment, MultiHeadRegressors, em_infer
from .errors import ConfigError, DataError, NumericError
from .losses import erm_loss, til_loss
from .nn import MlpNetwork, SgdOptimizer, backward, forward, load_tensors, make_rng, save_tensors

log = logging.getLogger(__name__)


@dataclass
class FoilConfig:
    lookback: int = 96
    horizon: int = 96
    n_envs: int = 2
    radius: int = 2
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr_til: float = 0.01
    lr_tei: float = 0.05
    momentum: float = 0.9
    epochs: int = 50  # Stage-1 epochs per outer round
    em_tol: float = 0.01
    em_max_iters: int = 10
    em_epochs: int = 100
    outer_rounds: int = 5
    batch_size: int = 64
    seed: int = 0
    hidden: List[int] = field(default_factory=lambda: [64])
    d_rep: int = 32
    activation: str = "relu"
    revin: bool = False
    feature_affine: bool = False
    ablate_suf: bool = False
    ablate_tei: bool = False
    ablate_lp: bool = False
    patience: int = 0  # outer rounds without val improvement before stopping; 0 disables
    grad_clip: float = 0.0  # global gradient-norm clip; 0 disables
    init_block: int = 1  # initial random labels are drawn per run of this many samples

    def validate(self) -> "FoilConfig":
        def need(cond, name, what):
            if not cond:
                raise ConfigError(f"{name}={getattr(self, name)!r}: {what}")

        need(self.lookback >= 1, "lookback", "must be >= 1")
        need(self.horizon >= 1, "horizon", "must be >= 1")
        need(self.n_envs >= 1, "n_envs", "must be >= 1")
        need(self.radius >= 0, "radius", "must be >= 0")
        need(self.lambda1 >= 0, "lambda1", "must be >= 0")
        need(self.lambda2 >= 0, "lambda2", "must be >= 0")
        for name in ("lr_til", "lr_tei"):
            need(getattr(self, name) > 0, name, "must be > 0")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(self.em_tol > 0, "em_tol", "must be > 0")
        for name in ("epochs", "em_max_iters", "outer_rounds", "batch_size", "d_rep", "init_block"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(self.em_epochs >= 0, "em_epochs", "must be >= 0")
        need(all(int(h) >= 1 for h in self.hidden), "hidden", "widths must be >= 1")
        need(self.activation in ("identity", "relu", "tanh"), "activation", "must be identity|relu|tanh")
        need(self.patience >= 0, "patience", "must be >= 0")
        need(self.grad_clip >= 0, "grad_clip", "must be >= 0")
        return self

    @property
    def effective_envs(self) -> int:
        return 1 if self.ablate_tei else self.n_envs

    @property
    def effective_radius(self) -> int:
        return 0 if self.ablate_lp else self.radius

    @property
    def base_loss(self) -> str:
        return "mse" if self.ablate_suf else "suf"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FoilConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


class FoilModel:
    """Forecaster ``rho(phi(affine(X)))`` with optional RevIN around it.

    When RevIN is on, each window is standardized per feature first, the
    per-feature affine map acts on the standardized values, and the output
    is mapped back with the target feature's window statistics.
    """

    def __init__(
        self,
        phi: MlpNetwork,
        rho: MlpNetwork,
        lookback: int,
        horizon: int,
        n_features: int,
        target: int,
        revin: bool = False,
        affine: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ):
        if phi.input_dim != lookback * n_features:
            raise ConfigError("backbone input width must equal lookback * n_features")
        if rho.input_dim != phi.output_dim or rho.output_dim != horizon:
            raise ConfigError("regressor must map the representation to the horizon")
        self.phi, self.rho = phi, rho
        self.lookback, self.horizon = lookback, horizon
        self.n_features, self.target = n_features, target
        self.revin = revin
        self.affine = affine
        self.heads: Optional[MultiHeadRegressors] = None
        self.norm_mean: Optional[np.ndarray] = None
        self.norm_std: Optional[np.ndarray] = None

    @classmethod
    def init(cls, config: FoilConfig, n_features: int, target: int, rng: np.random.Generator) -> "FoilModel":
        sizes = [config.lookback * n_features, *config.hidden, config.d_rep]
        phi = MlpNetwork.init(sizes, rng, config.activation, output_activation=config.activation)
        rho = MlpNetwork.init([config.d_rep, config.horizon], rng)
        affine = (np.ones(n_features), np.zeros(n_features)) if config.feature_affine else None
        return cls(phi, rho, config.lookback, config.horizon, n_features, target, config.revin, affine)

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {f"phi.{k}": v for k, v in self.phi.parameters().items()}
        params.update({f"rho.{k}": v for k, v in self.rho.parameters().items()})
        if self.affine is not None:
            params["affine.scale"], params["affine.shift"] = self.affine
        return params

    def _bump(self):
        self.phi.version += 1
        self.rho.version += 1

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        Xb = X[None] if single else X
        if Xb.ndim != 3 or Xb.shape[1:] != (self.lookback, self.n_features):
            raise ConfigError(f"input has shape {X.shape}, expected (..., {self.lookback}, {self.n_features})")
        return Xb, single

    def _inputs(self, Xb):
        stats = None
        if self.revin:
            Xb, stats = revin_normalize(Xb)
        xn = Xb
        if self.affine is not None:
            Xb = Xb * self.affine[0] + self.affine[1]
        return Xb.reshape(len(Xb), -1), xn, stats

    def representations(self, X) -> np.ndarray:
        Xb, _ = self._check(X)
        return self.phi(self._inputs(Xb)[0])

    def forward_train(self, X):
        Xb, _ = self._check(X)
        flat, xn, stats = self._inputs(Xb)
        rep, tape_phi = forward(self.phi, flat)
        out, tape_rho = forward(self.rho, rep)
        pred = revin_denormalize(out, stats, self.target) if stats is not None else out
        return pred, (xn, stats, tape_phi, tape_rho)

    def backward_train(self, cache, grad_pred) -> Dict[str, np.ndarray]:
        xn, stats, tape_phi, tape_rho = cache
        g = grad_pred
        if stats is not None:
            g = g * stats[1][:, 0, self.target][:, None]
        g_rho = backward(self.rho, tape_rho, g)
        g_phi = backward(self.phi, tape_phi, g_rho.input)
        grads = {f"phi.{k}": v for k, v in g_phi.params.items()}
        grads.update({f"rho.{k}": v for k, v in g_rho.params.items()})
        if self.affine is not None:
            gA = g_phi.input.reshape(xn.shape)
            grads["affine.scale"] = (gA * xn).sum(axis=(0, 1))
            grads["affine.shift"] = gA.sum(axis=(0, 1))
        return grads

    def save(self, path, meta: Optional[dict] = None) -> None:
        tensors = dict(self.parameters())
        if self.heads is not None:
            for e, head in enumerate(self.heads.heads):
                tensors.update({f"head{e}.{k}": v for k, v in head.parameters().items()})
        if self.norm_mean is not None:
            tensors["norm.mean"], tensors["norm.std"] = self.norm_mean, self.norm_std
        info = {
            "lookback": self.lookback,
            "horizon": self.horizon,
            "n_features": self.n_features,
            "target": self.target,
            "revin": self.revin,
            "phi": [l.activation for l in self.phi.layers],
            "n_heads": 0 if self.heads is None else len(self.heads),
        }
        save_tensors(path, tensors, {"model": info, **(meta or {})})

    @classmethod
    def load(cls, path) -> Tuple["FoilModel", dict]:
        tensors, meta = load_tensors(path)
        info = meta["model"]
        phi = _net_from(tensors, "phi.", info["phi"])
        rho = _net_from(tensors, "rho.", ["identity"])
        affine = None
        if "affine.scale" in tensors:
            affine = (tensors["affine.scale"].copy(), tensors["affine.shift"].copy())
        model = cls(phi, rho, info["lookback"], info["horizon"], info["n_features"], info["target"], info["revin"], affine)
        if info["n_heads"]:
            model.heads = MultiHeadRegressors(
                [_net_from(tensors, f"head{e}.", ["identity"]) for e in range(info["n_heads"])]
            )
        if "norm.mean" in tensors:
            model.norm_mean, model.norm_std = tensors["norm.mean"], tensors["norm.std"]
        return model, meta


def _net_from(tensors, prefix, activations):
    from .nn import DenseLayer

    n_layers = len({k.split(".")[1] for k in tensors if k.startswith(prefix)})
    acts = activations if len(activations) == n_layers else ["identity"] * n_layers
    return MlpNetwork(
        [DenseLayer(tensors[f"{prefix}{i}.weight"].copy(), tensors[f"{prefix}{i}.bias"].copy(), acts[i]) for i in range(n_layers)]
    )


def forecast(model: FoilModel, X) -> np.ndarray:
    """Deterministic horizon forecast for one window ``(l, d)`` or a batch."""
    _, single = model._check(X)
    pred = model.forward_train(X)[0]
    return pred[0] if single else pred


@dataclass
class TrainingLog:
    records: List[dict] = field(default_factory=list)
    assignment: Optional[EnvironmentAssignment] = None
    best_round: Optional[int] = None
    stopped_early: bool = False

    def append(self, rec: dict) -> None:
        self.records.append(rec)


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffle within each environment and deal every environment across all batches."""
    n = len(labels)
    n_batches = max(1, int(np.ceil(n / batch_size)))
    parts: List[List[np.ndarray]] = [[] for _ in range(n_batches)]
    for e in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == e))
        for b, chunk in enumerate(np.array_split(idx, n_batches)):
            if len(chunk):
                parts[b].append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts if p]


def _clip(grads: Dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def stage1_epoch(
    model: FoilModel,
    data: WindowArrays,
    labels: np.ndarray,
    config: FoilConfig,
    opt: SgdOptimizer,
    rng: np.random.Generator,
    lambda1: float,
    lambda2: float,
    base: str,
) -> float:
    """One pass of mini-batch descent on the composite loss; returns the batch-mean loss."""
    params = model.parameters()
    totals = []
    for idx in stratified_batches(labels, config.batch_size, rng):
        pred, cache = model.forward_train(data.X[idx])
        loss, grad = til_loss(pred, data.Y[idx], labels[idx], lambda1, lambda2, base, with_grad=True)
        if not np.isfinite(loss.total):
            raise NumericError(f"non-finite training loss {loss.total} (breakdown {loss.to_dict()})")
        grads = model.backward_train(cache, grad)
        _clip(grads, config.grad_clip)
        opt.step(params, grads)
        model._bump()
        totals.append(loss.total)
    return float(np.mean(totals))


def evaluate_mse(model: FoilModel, data: WindowArrays) -> float:
    if len(data) == 0:
        return float("nan")
    return float(erm_loss(forecast(model, data.X), data.Y).mean())


def _snapshot(model: FoilModel) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.parameters().items()}


def _restore(model: FoilModel, snap: Dict[str, np.ndarray]) -> None:
    for k, v in model.parameters().items():
        v[...] = snap[k]
    model._bump()


def _fit(train: WindowArrays, config: FoilConfig, val: Optional[WindowArrays], target: int, erm: bool):
    config.validate()
    if len(train) == 0:
        raise DataError("training split has no windows")
    if train.X.shape[1:] != (config.lookback, train.X.shape[2]) or train.Y.shape[1] != config.horizon:
        raise ConfigError("window shapes do not match lookback/horizon in the config")
    rng = make_rng(config.seed)
    model = FoilModel.init(config, train.X.shape[2], target, rng)
    opt = SgdOptimizer(config.lr_til, config.momentum)
    n_envs = 1 if erm else config.effective_envs
    assignment = EnvironmentAssignment.random(len(train), n_envs, rng, config.init_block)
    if erm:
        lambda1, lambda2, base = 0.0, 0.0, "mse"
    else:
        lambda1, lambda2, base = config.lambda1, config.lambda2, config.base_loss
    em_cfg = EmConfig(
        n_envs=n_envs,
        radius=config.effective_radius,
        tol=config.em_tol,
        max_iters=config.em_max_iters,
        epochs=config.em_epochs,
        lr=config.lr_tei,
        momentum=config.momentum,
        base=base,
    )
    trace = TrainingLog()
    use_val = val is not None and len(val) > 0 and config.patience > 0
    best_val, best_snap, since_best = np.inf, None, 0
    for rnd in range(config.outer_rounds):
        epoch_losses = [
            stage1_epoch(model, train, assignment.labels, config, opt, rng, lambda1, lambda2, base)
            for _ in range(config.epochs)
        ]
        pred = forecast(model, train.X)
        breakdown = til_loss(pred, train.Y, assignment.labels, lambda1, lambda2, base)
        rec = {
            "round": rnd,
            "epoch_loss": epoch_losses,
            "loss": breakdown.to_dict(),
            "train_mse": float(erm_loss(pred, train.Y).mean()),
        }
        if n_envs > 1:
            reps = model.representations(train.X)
            heads = MultiHeadRegressors.from_regressor(model.rho, n_envs)
            em = em_infer(heads, reps, train.Y, assignment, em_cfg)
            assignment = em.assignment
            model.heads = em.heads
            rec["em"] = {
                "iterations": em.iterations,
                "converged": em.converged,
                "changed_fraction": assignment.changed_fraction,
                "counts": assignment.counts().tolist(),
                "history": em.history,
            }
        rec["val_mse"] = evaluate_mse(model, val) if val is not None and len(val) else None
        trace.append(rec)
        log.info("round %d: loss %.5f val %s", rnd, breakdown.total, rec["val_mse"])
        if use_val:
            if rec["val_mse"] < best_val:
                best_val, best_snap, since_best = rec["val_mse"], _snapshot(model), 0
                trace.best_round = rnd
            else:
                since_best += 1
                if since_best >= config.patience:
                    trace.stopped_early = True
                    break
    if best_snap is not None:
        _restore(model, best_snap)
    trace.assignment = assignment
    return model, trace


def train_foil(train: WindowArrays, config: FoilConfig, val: Optional[WindowArrays] = None, target: int = 0):
    """Alternate invariant learning (Stage 1) and environment inference (Stage 2).

    Environment labels start uniformly at random. Each round runs
    ``config.epochs`` epochs of the composite loss with labels fixed, then
    re-infers labels by EM on the frozen backbone with heads warm-started
    from the current regressor.
    """
    return _fit(train, config, val, target, erm=False)


def train_erm(train: WindowArrays, config: FoilConfig, val: Optional[WindowArrays] = None, target: int = 0):
    """Same backbone and schedule, plain MSE on raw targets."""
    return _fit(train, config, val, target, erm=True)
