"""Client-side objectives: ERM, FedProx, focal, VAT, FLIT and FLIT+.

Per-sample reweighting factors and the adversarial direction ``r_adv`` are
treated as constants by the backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import LabeledGraphs
from .nnet import (
    AdamConfig,
    AdamState,
    GraphBatch,
    MpnnConfig,
    ParamVector,
    adam_step,
    backward,
    check_finite,
    forward,
    label_losses,
    per_sample_loss,
)

KINDS = ("erm", "prox", "focal", "vat", "flit", "flit_plus")


class MissingGlobalCache(KeyError):
    pass


class EmptyClientDataset(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "erm"
    gamma: float = 1.0
    mu: float = 0.01
    lam: float = 0.1
    vat_weight: float = 0.1
    epsilon: float = 1e-4
    xi: float = 2.5
    beta: float = 0.8
    power_iterations: int = 1
    # flit_plus only: False drops the discrepancy from both phi+ and the objective
    include_delta: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")
        for name in ("gamma", "mu", "lam", "vat_weight", "epsilon", "xi", "beta"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if self.epsilon <= 0 or self.xi <= 0:
            raise ValueError("epsilon and xi must be > 0")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.power_iterations < 1:
            raise ValueError("power_iterations must be >= 1")

    @property
    def uses_vat(self) -> bool:
        return self.kind == "vat" or (self.kind == "flit_plus" and self.include_delta)

    @property
    def uses_global_cache(self) -> bool:
        return self.kind in ("flit", "flit_plus")


# ---------------------------------------------------------------- scalar pieces

def focal_loss(y_hat, y, gamma: float):
    """-(1 - p_t)^gamma * log(p_t) for predicted probability ``y_hat`` of class 1."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    pt = np.where(np.asarray(y) == 1, y_hat, 1.0 - y_hat)
    return -((1.0 - pt) ** gamma) * np.log(pt)


def focal_from_loss(ell: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """(1 - e^-l)^gamma * l and its derivative in l.

    For cross-entropy l = -log p_t this is exactly the focal loss.
    """
    q = -np.expm1(-ell)
    val = q ** gamma * ell
    # gamma * q^(gamma-1) * e^-l * l, written to stay finite as l -> 0
    with np.errstate(divide="ignore", invalid="ignore"):
        extra = np.where(q > 0, gamma * q ** (gamma - 1.0) * np.exp(-ell) * ell, 0.0)
    return val, q ** gamma + extra


def flit_omega(phi_local, phi_global):
    phi_local = np.asarray(phi_local, dtype=np.float64)
    return phi_local + np.maximum(phi_local - np.asarray(phi_global, dtype=np.float64), 0.0)


def flit_weight(omega_normalized, gamma: float):
    return (-np.expm1(-np.asarray(omega_normalized, dtype=np.float64))) ** gamma


# ---------------------------------------------------------------- discrepancy

def discrepancy(clean: np.ndarray, pert: np.ndarray, task_type: str):
    """Per-sample D(clean, pert) and its gradients w.r.t. both raw outputs.

    Regression: squared Euclidean distance. Classification: task-mean KL
    between Bernoulli(sigmoid(clean)) and Bernoulli(sigmoid(pert)).
    """
    if task_type == "regression":
        diff = clean - pert
        return (diff * diff).sum(axis=1), 2.0 * diff, -2.0 * diff
    T = clean.shape[1]
    logp, log1mp = -np.logaddexp(0.0, -clean), -np.logaddexp(0.0, clean)
    logq, log1mq = -np.logaddexp(0.0, -pert), -np.logaddexp(0.0, pert)
    p, q = np.exp(logp), np.exp(logq)
    kl = p * (logp - logq) + (1.0 - p) * (log1mp - log1mq)
    d_clean = p * (1.0 - p) * (clean - pert) / T
    d_pert = (q - p) / T
    return kl.sum(axis=1) / T, d_clean, d_pert


def graph_norms(arr: np.ndarray, node_graph: np.ndarray, n_graphs: int) -> np.ndarray:
    sq = np.bincount(node_graph, weights=(arr * arr).sum(axis=1), minlength=n_graphs)
    return np.sqrt(sq)


class MpnnFunction:
    """Adapter exposing an MPNN at fixed parameters as a function of node features."""

    def __init__(self, params: ParamVector, cfg: MpnnConfig, batch: GraphBatch):
        self.params, self.cfg, self.batch = params, cfg, batch
        self.task_type = cfg.task_type
        self.node_graph, self.n_graphs = batch.node_graph, batch.n_graphs

    def forward(self, x):
        pred, cache = forward(self.params, self.cfg, self.batch, x)
        return pred.raw, cache

    def input_grad(self, cache, dout):
        return backward(self.params, self.cfg, cache, dout)[1]


@dataclass
class VatResult:
    delta: np.ndarray
    r_adv: np.ndarray
    perturbed_raw: np.ndarray
    perturbed_cache: object = field(repr=False)
    radius_error: float = 0.0


def vat_discrepancy(model, x: np.ndarray, clean_raw: np.ndarray, rng: np.random.Generator | None,
                    epsilon: float = 1e-4, xi: float = 2.5, power_iterations: int = 1,
                    r_adv: np.ndarray | None = None) -> VatResult:
    """Adversarial neighbor discrepancy, one ``r_adv`` of norm ``epsilon`` per graph.

    The direction comes from power iteration: the gradient of D(F(x), F(x + xi*d))
    with respect to the perturbed input, starting from a random unit ``d``.
    """
    ng, G = model.node_graph, model.n_graphs
    if r_adv is None:
        d = rng.standard_normal(x.shape)
        d = d / np.maximum(graph_norms(d, ng, G), 1e-300)[ng][:, None]
        for _ in range(power_iterations):
            raw, cache = model.forward(x + xi * d)
            _, _, d_pert = discrepancy(clean_raw, raw, model.task_type)
            g = model.input_grad(cache, d_pert)
            gn = graph_norms(g, ng, G)
            tiny = gn < 1e-12
            g = np.where(tiny[ng][:, None], d, g / np.where(tiny, 1.0, gn)[ng][:, None])
            d = g
        r_adv = epsilon * d
    radius = graph_norms(r_adv, ng, G)
    raw, cache = model.forward(x + xi * r_adv)
    delta, _, _ = discrepancy(clean_raw, raw, model.task_type)
    return VatResult(delta, r_adv, raw, cache, float(np.max(np.abs(radius - epsilon))))


# ---------------------------------------------------------------- state

@dataclass(frozen=True)
class ReweightState:
    omega_bar: float = 1.0
    initialized: bool = False


def update_omega_bar(state: ReweightState, omegas: np.ndarray, beta: float) -> ReweightState:
    mean = float(np.mean(omegas))
    if not state.initialized:
        return ReweightState(mean, True)
    return ReweightState(beta * state.omega_bar + (1.0 - beta) * mean, True)


@dataclass
class GlobalCache:
    """Per-sample uncertainty of the round's global model, keyed by dataset index."""

    ids: np.ndarray
    phi: np.ndarray
    delta: np.ndarray | None = None
    _pos: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._pos = {int(i): k for k, i in enumerate(self.ids)}

    def lookup(self, ids: np.ndarray, lam: float = 0.0) -> np.ndarray:
        try:
            pos = np.array([self._pos[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise MissingGlobalCache(f"no cached global value for sample {exc.args[0]}") from None
        phi = self.phi[pos]
        if self.delta is not None:
            phi = phi + lam * self.delta[pos]
        return phi


def compute_global_cache(params: ParamVector, cfg: MpnnConfig, data: LabeledGraphs,
                         strategy: StrategyConfig, rng: np.random.Generator | None,
                         chunk: int = 256) -> GlobalCache:
    phis, deltas = [], []
    for pos in data.chunks(chunk):
        batch = data.batch(pos)
        pred, _ = forward(params, cfg, batch)
        ell, _ = label_losses(pred.raw, data.y[pos], cfg.task_type)
        phis.append(per_sample_loss(ell, data.mask[pos]))
        if strategy.kind == "flit_plus" and strategy.include_delta:
            vat = vat_discrepancy(MpnnFunction(params, cfg, batch), batch.nodes, pred.raw, rng,
                                  strategy.epsilon, strategy.xi, strategy.power_iterations)
            deltas.append(vat.delta)
    return GlobalCache(data.ids.copy(), np.concatenate(phis), np.concatenate(deltas) if deltas else None)


# ---------------------------------------------------------------- objective

@dataclass
class ObjectiveResult:
    value: float
    grad: ParamVector
    sample_loss: np.ndarray
    weights: np.ndarray
    omega: np.ndarray | None = None
    delta: np.ndarray | None = None
    r_adv: np.ndarray | None = None
    radius_error: float = 0.0


def local_objective(params: ParamVector, cfg: MpnnConfig, batch: GraphBatch, y: np.ndarray,
                    mask: np.ndarray, strategy: StrategyConfig, *,
                    ids: np.ndarray | None = None,
                    global_params: ParamVector | None = None,
                    cache: GlobalCache | None = None,
                    state: ReweightState = ReweightState(),
                    rng: np.random.Generator | None = None,
                    weights: np.ndarray | None = None,
                    r_adv: np.ndarray | None = None) -> ObjectiveResult:
    """Objective value and exact parameter gradient for one minibatch.

    ``weights`` and ``r_adv`` pin the otherwise data-dependent constants,
    which is what finite-difference checks need.
    """
    kind = strategy.kind
    pred, fcache = forward(params, cfg, batch)
    raw = pred.raw
    mask = np.asarray(mask, dtype=bool)
    ell, dell = label_losses(raw, np.where(mask, y, 0.0), cfg.task_type)
    L = per_sample_loss(ell, mask)
    n_labels = mask.sum()
    if n_labels == 0:
        raise ValueError("minibatch has no present labels")
    G = batch.n_graphs

    vat = None
    if strategy.uses_vat:
        model = MpnnFunction(params, cfg, batch)
        vat = vat_discrepancy(model, batch.nodes, raw, rng, strategy.epsilon, strategy.xi,
                              strategy.power_iterations, r_adv=r_adv)

    omega = None
    if weights is None:
        weights = np.ones(G)
        if kind in ("flit", "flit_plus"):
            if cache is None or ids is None:
                raise MissingGlobalCache(f"{kind} needs the global-model cache and sample ids")
            phi_local = L
            if kind == "flit_plus" and vat is not None:
                phi_local = L + strategy.lam * vat.delta
            omega = flit_omega(phi_local, cache.lookup(ids, strategy.lam))
            norm = state.omega_bar if state.initialized else float(np.mean(omega))
            omega_hat = omega / norm if norm > 0 else np.zeros_like(omega)
            weights = flit_weight(omega_hat, strategy.gamma)

    mf = mask.astype(np.float64)
    if kind == "focal":
        fl, dfl = focal_from_loss(ell, strategy.gamma)
        value = float((fl * mf).sum() / n_labels)
        dout = dfl * dell * mf / n_labels
    else:
        wl = weights[:, None] * mf
        value = float((wl * ell).sum() / n_labels)
        dout = wl * dell / n_labels

    grad, _ = backward(params, cfg, fcache, dout)
    delta = None
    if vat is not None:
        delta = vat.delta
        coef = np.full(G, strategy.vat_weight / G) if kind == "vat" else weights / G
        value += float((coef * delta).sum())
        _, d_clean, d_pert = discrepancy(raw, vat.perturbed_raw, cfg.task_type)
        g_clean, _ = backward(params, cfg, fcache, coef[:, None] * d_clean)
        g_pert, _ = backward(params, cfg, vat.perturbed_cache, coef[:, None] * d_pert)
        grad = grad.with_values(grad.values + g_clean.values + g_pert.values)

    if kind == "prox":
        if global_params is None:
            raise ValueError("prox needs the global parameters")
        diff = params.values - global_params.values
        value += 0.5 * strategy.mu * float(diff @ diff)
        grad = grad.with_values(grad.values + strategy.mu * diff)

    return ObjectiveResult(
        value, grad, L, weights, omega, delta,
        None if vat is None else vat.r_adv,
        0.0 if vat is None else vat.radius_error,
    )


# ---------------------------------------------------------------- client update

@dataclass(frozen=True)
class TrainConfig:
    local_steps: int = 10
    batch_size: int = 64
    adam: AdamConfig = AdamConfig()

    def __post_init__(self):
        if self.local_steps < 0 or self.batch_size < 1:
            raise ValueError("local_steps must be >= 0 and batch_size >= 1")


def client_seed(run_seed: int, client_id: int, rnd: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, client_id, rnd])


@dataclass
class ClientResult:
    params: ParamVector
    loss_before: float
    loss_after: float
    diagnostics: dict


def dataset_loss(params: ParamVector, cfg: MpnnConfig, data: LabeledGraphs) -> float:
    total, count = 0.0, 0
    for pos in data.chunks():
        pred, _ = forward(params, cfg, data.batch(pos))
        ell, _ = label_losses(pred.raw, data.y[pos], cfg.task_type)
        m = data.mask[pos]
        total += float(ell[m].sum())
        count += int(m.sum())
    return total / max(count, 1)


def client_update(global_params: ParamVector, cfg: MpnnConfig, data: LabeledGraphs,
                  strategy: StrategyConfig, train: TrainConfig,
                  seed: np.random.SeedSequence, client_id: int = 0, rnd: int = 0) -> ClientResult:
    """Run ``train.local_steps`` Adam steps of the strategy objective from the global model."""
    if len(data) == 0:
        raise EmptyClientDataset(f"client {client_id} has no samples")
    batch_seq, vat_seq, cache_seq = seed.spawn(3)
    batch_rng = np.random.default_rng(batch_seq)
    vat_rng = np.random.default_rng(vat_seq)

    cache = None
    if strategy.uses_global_cache:
        cache = compute_global_cache(global_params, cfg, data, strategy, np.random.default_rng(cache_seq))
    loss_before = dataset_loss(global_params, cfg, data)

    params = global_params.copy()
    opt = AdamState.zeros(len(params))
    state = ReweightState()
    omegas, weights, deltas, radius_err = [], [], [], 0.0
    n = len(data)
    for step in range(train.local_steps):
        pos = batch_rng.choice(n, size=min(train.batch_size, n), replace=False)
        res = local_objective(
            params, cfg, data.batch(pos), data.y[pos], data.mask[pos], strategy,
            ids=data.ids[pos], global_params=global_params, cache=cache, state=state, rng=vat_rng,
        )
        check_finite(f"objective (client {client_id}, round {rnd}, step {step})", res.value)
        check_finite(f"gradient (client {client_id}, round {rnd}, step {step})", res.grad.values)
        new_values, opt = adam_step(params.values, res.grad.values, opt, train.adam)
        check_finite(f"parameters (client {client_id}, round {rnd}, step {step})", new_values)
        params = params.with_values(new_values)
        if res.omega is not None:
            state = update_omega_bar(state, res.omega, strategy.beta)
            omegas.append(float(res.omega.mean()))
        weights.append(float(res.weights.mean()))
        if res.delta is not None:
            deltas.append(float(res.delta.mean()))
            radius_err = max(radius_err, res.radius_error)

    loss_after = dataset_loss(params, cfg, data)
    diag = {
        "client_id": client_id,
        "round": rnd,
        "mean_omega": float(np.mean(omegas)) if omegas else None,
        "mean_weight": float(np.mean(weights)) if weights else None,
        "mean_delta": float(np.mean(deltas)) if deltas else None,
        "max_radius_error": radius_err if deltas else None,
        "loss_before": loss_before,
        "loss_after": loss_after,
    }
    return ClientResult(params, loss_before, loss_after, diag)

