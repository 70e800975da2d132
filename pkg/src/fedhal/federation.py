"""Four-step federated protocol: local training with hallucinated features,
client-to-server upload of models and domain statistics, weighted
aggregation, and redistribution.

Clients run in-process as isolated tasks.  Each one reads its raw data only
through an :class:`AuditedDataset` handle, so tests can assert that nothing
but model parameters and domain statistics crosses a client boundary.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from fedhal.data import DomainDataset, RetrievalSplit, pk_sample_batch
from fedhal.errors import (
    ConfigError,
    DomainError,
    ProtocolError,
    StaleUploadError,
    TrainingDivergenceError,
)
from fedhal.evaluation import extract_embeddings, retrieval_eval
from fedhal.hallucinate import (
    HallucinationPlan,
    beta_feature_mixup,
    dirichlet_feature_mixup,
    domain_hallucinate,
    feature_hallucinate,
)
from fedhal.losses import local_loss
from fedhal.model import (
    TRAIN,
    ClassifierHead,
    GradientSet,
    ModelParams,
    average_params,
    backward,
    batch_norm,
    forward,
    init_head,
    init_params,
    sgd_step,
)
from fedhal.numerics import GLOBAL_STREAM, Rng, sample_beta, sample_dirichlet
from fedhal.stats import DomainStats, compute_ifs, estimate_dfs, sample_domain_vectors

log = logging.getLogger(__name__)

VARIANTS = ("fedavg", "fh", "fh+dm", "fh+fm", "dfh")
HALLUCINATED_LOSSES = ("triplet", "cross_entropy")
METRIC_COLUMNS = ("epoch", "variant", "seed", "target_mAP", "target_rank1", "mean_local_loss", "wall_ms")


@dataclass
class RoundConfig:
    """Training schedule and method switches for one federated run.

    Defaults are desk scale: the decay milestones sit at the same fractions
    of training as the full-size recipe from :meth:`large_scale`, but the base
    learning rate is larger because the tiny MLP trains in far fewer steps.
    """

    epochs: int = 20
    iters_per_round: int = 40
    P: int = 8
    K: int = 4
    batch_size: int = 32
    lr: float = 0.01
    lr_milestones: tuple[int, ...] = (10, 15)
    lr_gamma: float = 0.5
    lam: float = 5.0
    margin: float = 0.5
    alpha: tuple[float, ...] | None = None
    variant: str = "dfh"
    resample_per_iteration: bool = False
    hallucinated_loss: str = "triplet"
    hidden_dim: int = 64
    feature_dim: int = 16
    seed: int = 0
    record_timing: bool = False

    def validate(self, num_clients: int | None = None) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.hallucinated_loss not in HALLUCINATED_LOSSES:
            raise ConfigError(f"hallucinated_loss must be one of {HALLUCINATED_LOSSES}")
        if self.P * self.K != self.batch_size:
            raise ConfigError(f"P*K = {self.P * self.K} does not equal batch_size = {self.batch_size}")
        if self.P < 2 or self.K < 2:
            raise ConfigError("P and K must both be at least 2")
        if self.epochs < 0 or self.iters_per_round < 0:
            raise ConfigError("epochs and iters_per_round must be non-negative")
        if not self.lr > 0 or not self.lr_gamma > 0:
            raise ConfigError("lr and lr_gamma must be positive")
        if self.lam < 0 or self.margin < 0:
            raise ConfigError("lam and margin must be non-negative")
        if self.alpha is not None:
            if any(not a > 0 for a in self.alpha):
                raise ConfigError("alpha entries must be positive")
            if num_clients is not None and len(self.alpha) != num_clients:
                raise ConfigError(f"alpha has {len(self.alpha)} entries for {num_clients} clients")

    @classmethod
    def large_scale(cls, **overrides) -> "RoundConfig":
        """Full-size schedule: 40 epochs of 200 iterations, batches of 16x4, lr 1e-3 halved at 20 and 30."""
        base = dict(epochs=40, iters_per_round=200, P=16, K=4, batch_size=64, lr=1e-3, lr_milestones=(20, 30))
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-indexed ``epoch``; multiplied by ``lr_gamma`` on entering each milestone epoch."""
        drops = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_gamma**drops

    def alpha_for(self, n: int) -> np.ndarray:
        return np.ones(n) if self.alpha is None else np.asarray(self.alpha, dtype=np.float64)


# --- privacy audit ------------------------------------------------------------------


@dataclass
class AccessLog:
    records: list[tuple[int, int, int]] = field(default_factory=list)

    def record(self, owner: int, accessor: int, rows: int) -> None:
        self.records.append((owner, accessor, rows))

    def cross_reads(self) -> list[tuple[int, int, int]]:
        return [r for r in self.records if r[0] != r[1]]


class AuditedDataset:
    """Read-only handle on a client's raw data that logs every access."""

    def __init__(self, dataset: DomainDataset, owner: int, access_log: AccessLog | None = None):
        self._dataset = dataset
        self.owner = owner
        self.access_log = access_log if access_log is not None else AccessLog()
        self.image_count = len(dataset)
        self.identity_count = dataset.identity_count

    def read(self, accessor: int, indices=None) -> tuple[np.ndarray, np.ndarray]:
        ds = self._dataset
        if indices is None:
            X, y = ds.samples, ds.labels
        else:
            X, y = ds.samples[indices], ds.labels[indices]
        self.access_log.record(self.owner, accessor, len(y))
        return X, y

    def sample_batch(self, accessor: int, P: int, K: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        self.access_log.record(self.owner, accessor, 0)
        idx = pk_sample_batch(self._dataset, P, K, rng)
        return self.read(accessor, idx)


# --- protocol state -------------------------------------------------------------------


@dataclass
class ClientState:
    client_id: int
    data: AuditedDataset
    params: ModelParams
    head: ClassifierHead
    stream_id: int | None = None
    dfs_snapshot: dict[int, DomainStats] = field(default_factory=dict)
    last_loss: float = float("nan")
    loss_trace: tuple[float, ...] = ()

    def __post_init__(self):
        if self.stream_id is None:
            self.stream_id = self.client_id
        if self.head.num_classes != self.identity_count:
            raise ProtocolError(
                f"client {self.client_id}: head width {self.head.num_classes} != {self.identity_count} identities"
            )

    @property
    def image_count(self) -> int:
        return self.data.image_count

    @property
    def identity_count(self) -> int:
        return self.data.identity_count


@dataclass
class ServerState:
    params: ModelParams
    registry: dict[int, DomainStats] = field(default_factory=dict)
    epoch: int = 0
    staged: dict[int, ModelParams] = field(default_factory=dict)


class Upload(NamedTuple):
    client_id: int
    params: ModelParams
    dfs: DomainStats


# --- local training ----------------------------------------------------------------------


def client_dfs(client: ClientState, epoch: int) -> DomainStats:
    """Domain statistics from the client's current local model over its full local set."""
    X, y = client.data.read(client.client_id)
    features = extract_embeddings(client.params, X)
    return estimate_dfs(compute_ifs(features, y), client.client_id, epoch)


def make_plan(
    client_id: int, dfs_all: Mapping[int, DomainStats], cfg: RoundConfig, rng: Rng
) -> HallucinationPlan:
    """Sample per-domain vectors for every client and build the variant's novel-domain recipe.

    For ``dfh`` the novel domain is the Dirichlet-weighted mixture of domain
    vectors.  ``fh+dm`` keeps the Dirichlet weights for mixing transformed
    batches and ``fh+fm`` stores a two-domain Beta(1, 1) weight pair.
    """
    ids = sorted(dfs_all)
    targets = {k: sample_domain_vectors(dfs_all[k], rng) for k in ids}
    novel = weights = None
    if cfg.variant == "dfh":
        weights = sample_dirichlet(cfg.alpha_for(len(ids)), rng)
        novel = domain_hallucinate([targets[k] for k in ids], weights)
    elif cfg.variant == "fh+dm":
        weights = sample_dirichlet(cfg.alpha_for(len(ids)), rng)
    elif cfg.variant == "fh+fm":
        a, b = (int(j) for j in rng.choice(len(ids), 2, replace=False))
        lam = sample_beta(1.0, 1.0, rng)
        weights = np.zeros(len(ids))
        weights[a], weights[b] = lam, 1.0 - lam
        return HallucinationPlan(targets, None, weights, (a, b))
    return HallucinationPlan(targets, novel, weights)


def _novel_batch(bn: np.ndarray, plan: HallucinationPlan, cfg: RoundConfig):
    """Novel-domain batch and the per-dimension scale mapping the BN output onto it.

    The mixup baselines mix the hallucinated batches of all domains (the
    local one included, through its own sampled domain vectors).
    """
    ids = sorted(plan.targets)
    if cfg.variant == "dfh":
        return feature_hallucinate(bn, plan.novel), plan.novel.sigma
    if cfg.variant == "fh+dm":
        pool = [feature_hallucinate(bn, plan.targets[k]) for k in ids]
        scale = sum(w * plan.targets[k].sigma for w, k in zip(plan.weights, ids))
        return dirichlet_feature_mixup(pool, plan.weights), scale
    if cfg.variant == "fh+fm":
        a, b = plan.pair
        lam = plan.weights[a]
        ta, tb = plan.targets[ids[a]], plan.targets[ids[b]]
        F = beta_feature_mixup(feature_hallucinate(bn, ta), feature_hallucinate(bn, tb), lam=lam)
        return F, lam * ta.sigma + (1.0 - lam) * tb.sigma
    return None, None


def local_objective(
    params: ModelParams,
    head: ClassifierHead,
    X: np.ndarray,
    y: np.ndarray,
    client_id: int,
    plan: HallucinationPlan | None,
    cfg: RoundConfig,
    num_domains: int,
    update_running: bool = True,
) -> tuple[float, GradientSet]:
    """Local loss of one batch and its gradient for the trunk and the head.

    ``plan=None`` trains on the original features only.  Hallucinated
    batches are built from the train-mode BN output, so their gradients
    reach the trunk through the batch-norm backward pass.
    """
    feats, cache = forward(params, X, TRAIN)
    bn, bn_cache = batch_norm(feats, params, TRAIN, update_running=update_running)

    F_novel, F_others, others = None, [], []
    if plan is not None:
        others = [k for k in sorted(plan.targets) if k != client_id]
        F_others = [feature_hallucinate(bn, plan.targets[k]) for k in others]
        F_novel, novel_scale = _novel_batch(bn, plan, cfg)

    res = local_loss(
        feats, y, F_novel, F_others, head, cfg.lam, cfg.margin,
        num_domains=num_domains, hallucinated_loss=cfg.hallucinated_loss,
    )
    d_bn = None
    if plan is not None:
        d_bn = np.zeros_like(bn)
        for k, g in zip(others, res.grad_others):
            d_bn += g * plan.targets[k].sigma
        if res.grad_novel is not None:
            d_bn += res.grad_novel * novel_scale
    grads = backward(params, cache, res.grad_local, bn_cache=bn_cache if plan is not None else None, d_normalized=d_bn)
    grads.head_W, grads.head_b = res.head_W, res.head_b
    return res.value, grads


def local_train(
    client: ClientState, dfs_all: Mapping[int, DomainStats], cfg: RoundConfig, epoch: int = 1
) -> ClientState:
    """Run ``cfg.iters_per_round`` SGD steps of the local objective for one client."""
    if cfg.iters_per_round == 0:
        return client
    hallucinating = cfg.variant != "fedavg" and cfg.lam > 0
    if hallucinating:
        missing = {client.client_id} - set(dfs_all)
        if missing or len(dfs_all) < 2:
            raise ProtocolError(f"client {client.client_id}: domain statistics missing for {sorted(missing) or 'peers'}")
    batch_rng = Rng.derive(cfg.seed, client.stream_id, epoch, "batch")
    hal_rng = Rng.derive(cfg.seed, client.stream_id, epoch, "hallucinate")
    # Domain vectors and mixing weights are drawn once per local round.
    plan = make_plan(client.client_id, dfs_all, cfg, hal_rng) if hallucinating else None
    lr = cfg.lr_at(epoch)

    params, head = client.params.copy(), client.head
    losses = []
    for _ in range(cfg.iters_per_round):
        X, y = client.data.sample_batch(client.client_id, cfg.P, cfg.K, batch_rng)
        if hallucinating and cfg.resample_per_iteration:
            plan = make_plan(client.client_id, dfs_all, cfg, hal_rng)
        value, grads = local_objective(params, head, X, y, client.client_id, plan, cfg, len(dfs_all))
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"client {client.client_id}: non-finite local loss")
        losses.append(value)
        params, head = sgd_step(params, head, grads, lr)

    return replace(client, params=params, head=head, last_loss=float(np.mean(losses)), loss_trace=tuple(losses))


# --- server side ------------------------------------------------------------------------------


def client_to_server_update(server: ServerState, uploads: Sequence[Upload]) -> ServerState:
    """Overwrite the registry with freshly stamped statistics and stage the uploaded models."""
    seen = set()
    for up in uploads:
        if up.client_id in seen:
            raise ProtocolError(f"duplicate upload from client {up.client_id}")
        seen.add(up.client_id)
        if up.dfs.client_id != up.client_id:
            raise ProtocolError(f"client {up.client_id} uploaded statistics labelled {up.dfs.client_id}")
        if up.dfs.epoch_stamp < server.epoch:
            raise StaleUploadError(
                f"client {up.client_id} uploaded epoch {up.dfs.epoch_stamp} statistics during epoch {server.epoch}"
            )
        if up.dfs.epoch_stamp > server.epoch:
            raise ProtocolError(f"client {up.client_id} uploaded statistics from the future epoch {up.dfs.epoch_stamp}")
    registry = dict(server.registry)
    staged = dict(server.staged)
    for up in uploads:
        registry[up.client_id] = up.dfs
        staged[up.client_id] = up.params
    return ServerState(server.params, registry, server.epoch, staged)


def aggregate(
    server: ServerState, models: Sequence[ModelParams], image_counts: Sequence[int], client_ids: Sequence[int] | None = None
) -> ModelParams:
    """Image-count weighted average of client models, summed in ascending client-id order."""
    counts = np.asarray(image_counts, dtype=np.float64)
    if len(models) != counts.size:
        raise ProtocolError(f"{len(models)} models but {counts.size} image counts")
    if np.any(counts <= 0):
        raise DomainError("image counts must be positive")
    ids = list(range(len(models))) if client_ids is None else list(client_ids)
    order = sorted(range(len(models)), key=lambda j: ids[j])
    total = counts.sum()
    weights = counts[order] / total
    if abs(weights.sum() - 1.0) > 1e-12:
        raise DomainError(f"aggregation weights sum to {weights.sum()!r}")
    return average_params([models[j] for j in order], weights)


def redistribute(server: ServerState, clients: Sequence[ClientState]) -> list[ClientState]:
    """Hand every client a private copy of the global trunk and the registry snapshot.

    Classifier heads stay local.
    """
    snapshot = dict(server.registry)
    return [replace(c, params=server.params.copy(), dfs_snapshot=snapshot) for c in clients]


# --- driver ------------------------------------------------------------------------------------


@dataclass
class FederatedRun:
    global_params: ModelParams
    metrics: list[dict]
    clients: list[ClientState]
    server: ServerState
    access_log: AccessLog


def make_clients(
    sources: Sequence[DomainDataset], cfg: RoundConfig, access_log: AccessLog | None = None
) -> tuple[list[ClientState], ModelParams]:
    access_log = access_log if access_log is not None else AccessLog()
    init = init_params(
        Rng.derive(cfg.seed, GLOBAL_STREAM, 0, "init-model"),
        sources[0].input_dim, cfg.hidden_dim, cfg.feature_dim,
    )
    clients = []
    for i, ds in enumerate(sources):
        head = init_head(Rng.derive(cfg.seed, i, 0, "init-head"), cfg.feature_dim, ds.identity_count, i)
        clients.append(ClientState(i, AuditedDataset(ds, i, access_log), init.copy(), head))
    return clients, init


def evaluate_target(params: ModelParams, split: RetrievalSplit) -> tuple[float, float]:
    """Target-domain mAP and rank-1, both in percent."""
    q = extract_embeddings(params, split.query)
    g = extract_embeddings(params, split.gallery)
    res = retrieval_eval(q, split.query.labels, g, split.gallery.labels)
    return 100.0 * res.mAP, 100.0 * res.rank1


def run_federated(
    sources: Sequence[DomainDataset] | Sequence[ClientState],
    cfg: RoundConfig,
    target: RetrievalSplit | None = None,
    access_log: AccessLog | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> FederatedRun:
    """Initialise domain statistics, then repeat train -> upload -> aggregate -> redistribute."""
    if len(sources) < 2:
        raise ProtocolError("federated training needs at least two clients")
    cfg.validate(len(sources))
    if isinstance(sources[0], ClientState):
        clients = list(sources)
        access_log = clients[0].data.access_log
    else:
        access_log = access_log if access_log is not None else AccessLog()
        clients, _ = make_clients(sources, cfg, access_log)
    counts = [c.image_count for c in clients]
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ProtocolError("client ids must be unique")

    metrics: list[dict] = []

    def record(epoch: int, params: ModelParams, mean_loss: float, started: float) -> None:
        mAP, r1 = evaluate_target(params, target) if target is not None else (float("nan"), float("nan"))
        row = {
            "epoch": epoch,
            "variant": cfg.variant,
            "seed": cfg.seed,
            "target_mAP": mAP,
            "target_rank1": r1,
            "mean_local_loss": mean_loss,
            "wall_ms": round((time.perf_counter() - started) * 1000.0) if cfg.record_timing else 0,
        }
        metrics.append(row)
        log.debug("epoch %d variant %s mAP %.2f rank1 %.2f loss %.4f", epoch, cfg.variant, mAP, r1, mean_loss)
        if on_epoch is not None:
            on_epoch(row)

    started = time.perf_counter()
    server = ServerState(clients[0].params.copy(), epoch=0)
    server = client_to_server_update(server, [Upload(c.client_id, c.params, client_dfs(c, 0)) for c in clients])
    server.params = aggregate(server, [server.staged[i] for i in ids], counts, ids)
    clients = redistribute(server, clients)
    record(0, server.params, float("nan"), started)

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        server = replace(server, epoch=epoch, staged={})
        # Step 1: local training against the registry snapshot each client received.
        clients = [local_train(c, c.dfs_snapshot, cfg, epoch) for c in clients]
        # Step 2: upload local models and freshly estimated statistics.
        server = client_to_server_update(
            server, [Upload(c.client_id, c.params, client_dfs(c, epoch)) for c in clients]
        )
        # Step 3: aggregation.
        server.params = aggregate(server, [server.staged[i] for i in ids], counts, ids)
        # Step 4: redistribution.
        clients = redistribute(server, clients)
        record(epoch, server.params, float(np.mean([c.last_loss for c in clients])), started)

    return FederatedRun(server.params, metrics, clients, server, access_log)
