"""Round orchestration: local evidential training, uncertainty-weighted
aggregation, personalised EU heads and psi-calibrated CFE weights.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import cfe, kernels
from . import tensor as T
from .config import AblationFlags, ExperimentConfig, FederationConfig, dump_config
from .data import ClientDataset, generate_task, iou, overall_accuracy, read_dataset
from .errors import ConfigError, NumericError, ProtocolError
from .evidential import DirichletOutput, LossConfig, combined_loss, one_hot_labels, uncertainty
from .model import Group, ParameterSet, build_network, forward, save_parameters
from .optim import make_optimizer

log = logging.getLogger(__name__)

CSV_HEADER = ["round", "client", "weight", "u_bar", "loss_seg", "loss_eu", "iou", "oa"]


class AggregationMode(str, Enum):
    TUW = "tuw"
    FEDAVG = "fedavg"


@dataclass
class ClientState:
    index: int
    data: ClientDataset
    eu_head: dict  # personalised EU head, never overwritten by the server
    psi: dict
    cfe_local: dict  # personalised CFE weights used for training and evaluation
    u_bar: float = 1.0

    @property
    def n_samples(self):
        return self.data.n_train

    def copy(self):
        return replace(
            self,
            eu_head={n: a.copy() for n, a in self.eu_head.items()},
            psi={n: a.copy() for n, a in self.psi.items()},
            cfe_local={n: a.copy() for n, a in self.cfe_local.items()},
        )


@dataclass
class LocalResult:
    index: int
    delta: dict
    u_bar: float
    loss_seg: float
    loss_eu: float
    trained_cfe: dict
    eu_head: dict
    error: str | None = None

    @property
    def failed(self):
        return self.error is not None


@dataclass
class ClientRecord:
    client: int
    weight: float
    u_bar: float
    loss_seg: float
    loss_eu: float
    iou: float
    oa: float


@dataclass
class RoundReport:
    round: int
    records: list
    kl_weight: float
    timings: dict = field(default_factory=dict)

    @property
    def weights(self):
        return np.array([r.weight for r in self.records])

    def aggregate_record(self):
        def avg(attr):
            return float(np.mean([getattr(r, attr) for r in self.records]))
        return ClientRecord(-1, float(self.weights.sum()), avg("u_bar"), avg("loss_seg"),
                            avg("loss_eu"), avg("iou"), avg("oa"))

    def csv_rows(self):
        rows = []
        for r in self.records + [self.aggregate_record()]:
            rows.append([str(self.round), "ALL" if r.client < 0 else str(r.client)]
                        + [repr(float(getattr(r, k))) for k in CSV_HEADER[2:]])
        return rows


@dataclass
class RoundContext:
    """Everything ``run_round`` needs besides the global model and clients."""
    fed: FederationConfig
    loss: LossConfig
    ablation: AblationFlags
    seed: int = 0
    callback: object = None

    @property
    def use_cfe(self):
        return not self.ablation.disable_cfe

    @property
    def mode(self):
        if self.ablation.disable_tuw:
            return AggregationMode.FEDAVG
        return AggregationMode(self.fed.mode)

    def shared_groups(self):
        groups = [Group.ADAPTER, Group.DECODER, Group.SEG_HEAD]
        if self.use_cfe:
            groups.append(Group.CFE)
        if self.ablation.share_eu_head:
            groups.append(Group.EU_HEAD)
        return tuple(groups)

    def trained_groups(self):
        groups = [Group.ADAPTER, Group.DECODER, Group.SEG_HEAD, Group.EU_HEAD]
        if self.use_cfe:
            groups.append(Group.CFE)
        return tuple(groups)


# ---------------------------------------------------------------------------
# server-side maths


def top_tau_uncertainty(maps, tau_fraction) -> float:
    """Average over samples of the mean of each map's top-tau pixels.

    ``tau = ceil(tau_fraction * H * W)``.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if not 0 < tau_fraction <= 1:
        raise ConfigError("tau_fraction must lie in (0, 1]")
    pixels = maps.shape[1] * maps.shape[2]
    tau = max(1, math.ceil(round(tau_fraction * pixels, 9)))
    per_sample = kernels.topk_mean(maps.reshape(len(maps), -1), tau)
    return float(per_sample.mean())


def compute_weights(u_bar, n_samples, t, mode=AggregationMode.TUW) -> np.ndarray:
    """Aggregation weights: data-proportional at t=0 (and always for FedAvg),
    otherwise proportional to each client's confidence 1 - u_bar."""
    n = np.asarray(n_samples, dtype=np.float64)
    u = np.asarray(u_bar, dtype=np.float64)
    if n.shape != u.shape or n.size == 0:
        raise ValueError("u_bar and n_samples must be equal-length and non-empty")
    if np.any(n < 1):
        raise ValueError("sample counts must be >= 1")
    mode = AggregationMode(mode)
    if mode is AggregationMode.FEDAVG or t == 0:
        return n / n.sum()
    if np.any((u < 0) | (u > 1)):
        raise ValueError("u_bar values must lie in [0, 1]")
    confidence = 1.0 - u
    total = confidence.sum()
    if total <= 0:
        log.warning("round %d: every client reports u_bar == 1; falling back to N_k/N weights", t)
        return n / n.sum()
    return confidence / total


def aggregate(deltas, weights, global_params: ParameterSet, names=None) -> ParameterSet:
    """theta + sum_k w_k * delta_k over the uploaded (shared) parameters."""
    if not deltas:
        raise ProtocolError("aggregate needs at least one client update")
    names = list(deltas[0]) if names is None else list(names)
    if len(weights) != len(deltas):
        raise ProtocolError("one weight per client update is required")
    for k, d in enumerate(deltas):
        if set(d) != set(names):
            raise ProtocolError(f"client update {k} does not match the shared parameter schema")
        for n in names:
            if d[n].shape != global_params[n].shape:
                raise ProtocolError(f"client update {k}: {n} has shape {d[n].shape}")
        if any(global_params.groups[n] == Group.FROZEN for n in names):
            raise ProtocolError("frozen parameters cannot be aggregated")
    updates = {}
    for n in names:
        acc = np.zeros(global_params[n].shape, dtype=np.float64)
        for w, d in zip(weights, deltas):
            acc += float(w) * d[n]
        updates[n] = (global_params[n] + acc).astype(np.float32)
    return global_params.with_values(updates)


# ---------------------------------------------------------------------------
# client-side


def client_model(global_params: ParameterSet, state: ClientState, ctx: RoundContext) -> ParameterSet:
    """Global shared weights plus the client's personal EU head and CFE."""
    personal = {}
    if not ctx.ablation.share_eu_head:
        personal.update(state.eu_head)
    if ctx.use_cfe:
        personal.update(state.cfe_local)
    return global_params.with_values(personal)


def _batch_loss(params, images, labels, emb, t, ctx, trainable=(), overrides=None):
    out = forward(params, images, emb, trainable=trainable, overrides=overrides, use_cfe=ctx.use_cfe)
    dirichlet = DirichletOutput.from_evidence(out.evidence)
    terms = combined_loss(out.seg_logits, dirichlet, labels, t, ctx.loss)
    return out, dirichlet, terms


def local_train(state: ClientState, global_params: ParameterSet, t: int, ctx: RoundContext) -> LocalResult:
    """E epochs of mini-batch training on the client's data.

    Returns the delta of the shared groups, the top-tau uncertainty of the
    trained local model over the client's training samples, and the updated
    personal parameters.
    """
    fed = ctx.fed
    data = state.data
    if data.n_train == 0:
        raise ConfigError(f"client {state.index} has an empty training set")
    params = client_model(global_params, state, ctx)
    shared = params.names(*ctx.shared_groups())
    start = {n: params[n].copy() for n in shared}
    trainable = params.names(*ctx.trained_groups())
    cfg = params.config
    emb = cfe.one_hot(state.index, cfg.num_clients)
    labels = one_hot_labels(data.train_masks, cfg.num_classes)
    images = data.train_images
    rng = np.random.default_rng([ctx.seed, state.index, t, 0])
    opt = make_optimizer(fed.optimizer, params.arrays, fed.lr)

    u_maps = np.empty(data.train_masks.shape, dtype=np.float64)
    seg_sum = eu_sum = 0.0
    try:
        for epoch in range(fed.epochs):
            order = rng.permutation(data.n_train)
            final = epoch == fed.epochs - 1
            for lo in range(0, data.n_train, fed.batch_size):
                idx = order[lo:lo + fed.batch_size]
                out, dirichlet, terms = _batch_loss(params, images[idx], labels[idx], emb, t, ctx, trainable)
                T.backward(terms.total)
                if final:
                    seg_sum += terms.seg.item() * len(idx)
                    eu_sum += terms.eu.item() * len(idx)
                opt.step({n: leaf.grad for n, leaf in out.leaves.items()})
        # uncertainty of the model the client ends up with (no tape)
        for lo in range(0, data.n_train, 32):
            sl = slice(lo, lo + 32)
            _, dirichlet, terms = _batch_loss(params, images[sl], labels[sl], emb, t, ctx)
            u_maps[sl] = uncertainty(dirichlet).data
            if fed.epochs == 0:
                n = len(images[sl])
                seg_sum += terms.seg.item() * n
                eu_sum += terms.eu.item() * n
        if not (math.isfinite(seg_sum) and math.isfinite(eu_sum)):
            raise NumericError("non-finite training loss")
    except NumericError as exc:
        log.warning("client %d failed in round %d: %s", state.index, t, exc)
        return LocalResult(state.index, {}, float("nan"), float("nan"), float("nan"), {}, {}, str(exc))

    delta = {n: params[n] - start[n] for n in shared}
    u_bar = top_tau_uncertainty(u_maps, ctx.loss.tau_fraction)
    return LocalResult(
        state.index, delta, u_bar,
        seg_sum / data.n_train, eu_sum / data.n_train,
        trained_cfe={n: params[n].copy() for n in params.names(Group.CFE)},
        eu_head={n: params[n].copy() for n in params.names(Group.EU_HEAD)},
    )


def personalize_cfe(state: ClientState, trained_cfe, new_global: ParameterSet, t, ctx: RoundContext):
    """Learn psi on one local mini-batch, then blend local and global CFE weights."""
    global_cfe = new_global.subset(Group.CFE)
    model = client_model(new_global, state, ctx)
    cfg = model.config
    data = state.data
    rng = np.random.default_rng([ctx.seed, state.index, t, 1])
    idx = np.sort(rng.permutation(data.n_train)[:ctx.fed.batch_size])
    images = data.train_images[idx]
    labels = one_hot_labels(data.train_masks[idx], cfg.num_classes)
    emb = cfe.one_hot(state.index, cfg.num_clients)

    def loss_fn(calibrated):
        return _batch_loss(model, images, labels, emb, t, ctx, overrides=calibrated)[2].total

    psi = cfe.psi_update(state.psi, trained_cfe, global_cfe, loss_fn,
                         ctx.fed.effective_psi_lr, ctx.fed.psi_epochs)
    calibrated = cfe.psi_calibrate(trained_cfe, global_cfe, psi)
    return psi, {n: np.asarray(v, dtype=np.float32) for n, v in calibrated.items()}


def evaluate(params: ParameterSet, state: ClientState, ctx: RoundContext, chunk=32):
    """Dataset-level IoU (positive class 1) and OA on the client's test split."""
    data = state.data
    if data.n_test == 0:
        return float("nan"), float("nan")
    emb = cfe.one_hot(state.index, params.config.num_clients)
    preds = []
    for lo in range(0, data.n_test, chunk):
        out = forward(params, data.test_images[lo:lo + chunk], emb, use_cfe=ctx.use_cfe)
        preds.append(out.seg_logits.data.argmax(axis=1))
    pred = np.concatenate(preds)
    return iou(pred, data.test_masks, positive=1), overall_accuracy(pred, data.test_masks)


def select_clients(num_clients, t, ctx: RoundContext):
    if ctx.fed.participation >= 1.0:
        return list(range(num_clients))
    m = max(1, math.ceil(ctx.fed.participation * num_clients))
    rng = np.random.default_rng([ctx.seed, t, 2])
    return sorted(int(k) for k in rng.choice(num_clients, size=m, replace=False))


def _notify(ctx, event, t, k, clients, global_params):
    if ctx.callback is not None:
        ctx.callback(event, t, k, clients, global_params)


def run_round(global_params: ParameterSet, clients, t: int, ctx: RoundContext, executor=None):
    """One broadcast / train / aggregate / personalise / evaluate cycle."""
    timings = {}
    clients = list(clients)
    tic = time.perf_counter()
    selected = select_clients(len(clients), t, ctx)

    if executor is not None:
        futures = [executor.submit(local_train, clients[k], global_params, t, ctx) for k in selected]
        results = [f.result() for f in futures]
    else:
        results = []
        for k in selected:
            results.append(local_train(clients[k], global_params, t, ctx))
            _notify(ctx, "local_train", t, k, clients, global_params)
    timings["local_train"] = time.perf_counter() - tic

    tic = time.perf_counter()
    survivors = [r for r in results if not r.failed]
    weights = np.zeros(len(clients))
    new_global = global_params
    if survivors:
        w = compute_weights([r.u_bar for r in survivors],
                            [clients[r.index].n_samples for r in survivors], t, ctx.mode)
        for r, wk in zip(survivors, w):
            weights[r.index] = wk
        shared = global_params.names(*ctx.shared_groups())
        new_global = aggregate([r.delta for r in survivors], w, global_params, shared)
    timings["aggregate"] = time.perf_counter() - tic

    tic = time.perf_counter()
    for r in survivors:
        state = clients[r.index].copy()
        state.u_bar = r.u_bar
        state.eu_head = r.eu_head
        if ctx.use_cfe:
            state.psi, state.cfe_local = personalize_cfe(state, r.trained_cfe, new_global, t, ctx)
        clients[r.index] = state
        _notify(ctx, "psi_update", t, r.index, clients, new_global)
    timings["personalize"] = time.perf_counter() - tic

    tic = time.perf_counter()
    by_index = {r.index: r for r in results}
    records = []
    for state in clients:
        score_iou, score_oa = evaluate(client_model(new_global, state, ctx), state, ctx)
        r = by_index.get(state.index)
        loss_seg = r.loss_seg if r else float("nan")
        loss_eu = r.loss_eu if r else float("nan")
        records.append(ClientRecord(state.index, float(weights[state.index]), float(state.u_bar),
                                    loss_seg, loss_eu, score_iou, score_oa))
    timings["evaluate"] = time.perf_counter() - tic
    report = RoundReport(t, records, ctx.loss.kl_weight(t), timings)
    return new_global, report, clients


# ---------------------------------------------------------------------------
# experiment driver


@dataclass
class ExperimentResult:
    path: Path
    reports: list
    initial_params: ParameterSet
    global_params: ParameterSet
    clients: list


def load_datasets(cfg: ExperimentConfig):
    if cfg.dataset_path is not None:
        return read_dataset(cfg.dataset_path)
    return generate_task(cfg.data)


def resolve_network(cfg: ExperimentConfig, datasets):
    sample = datasets[0].train_images
    _, c, h, w = sample.shape
    return replace(cfg.network, in_channels=c, image_size=(h, w), num_clients=len(datasets))


def warmup_encoder(params: ParameterSet, cfg: ExperimentConfig, ctx: RoundContext) -> ParameterSet:
    """Centralised pre-training of every group on a held-out synthetic pool.

    Only the encoder weights are kept; they are then frozen for federation.
    """
    pool = generate_task(cfg.data, seed=cfg.seed + 1_000_003)
    images = np.concatenate([d.train_images for d in pool])
    masks = np.concatenate([d.train_masks for d in pool])
    labels = one_hot_labels(masks, params.config.num_classes)
    work = params.copy()
    opt = make_optimizer("adam", work.arrays, ctx.fed.lr)
    rng = np.random.default_rng([cfg.seed, 99])
    zero_emb = np.zeros(params.config.num_clients, dtype=np.float32)
    for _ in range(cfg.warmup_steps):
        idx = rng.choice(len(images), size=min(ctx.fed.batch_size, len(images)), replace=False)
        out, _, terms = _batch_loss(work, images[idx], labels[idx], zero_emb, 0, ctx, trainable=list(work))
        T.backward(terms.total)
        opt.step({n: leaf.grad for n, leaf in out.leaves.items()})
    return params.with_values(work.subset(Group.FROZEN))


def init_clients(params: ParameterSet, datasets):
    eu = params.subset(Group.EU_HEAD)
    cfe_params = params.subset(Group.CFE)
    return [
        ClientState(k, ds,
                    eu_head={n: a.copy() for n, a in eu.items()},
                    psi=cfe.init_psi(cfe_params),
                    cfe_local={n: a.copy() for n, a in cfe_params.items()})
        for k, ds in enumerate(datasets)
    ]


def run_experiment(cfg: ExperimentConfig, callback=None) -> ExperimentResult:
    """Run every round, streaming metrics.csv and writing checkpoints."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(cfg)
    net_cfg = resolve_network(cfg, datasets)
    ctx = RoundContext(cfg.federation, cfg.loss, cfg.ablation, cfg.seed, callback)

    params = build_network(net_cfg, cfg.seed)
    if cfg.warmup_steps:
        params = warmup_encoder(params, cfg, ctx)
    initial = params.copy()
    clients = init_clients(params, datasets)
    dump_config(cfg, out_dir / "config.yaml")

    reports = []
    executor = ThreadPoolExecutor(cfg.federation.workers) if cfg.federation.workers > 1 else None
    try:
        with open(out_dir / "metrics.csv", "w", newline="") as fh, \
                open(out_dir / "timings.jsonl", "w") as tfh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for t in range(cfg.federation.rounds):
                params, report, clients = run_round(params, clients, t, ctx, executor)
                writer.writerows(report.csv_rows())
                fh.flush()
                tfh.write(json.dumps({"round": t, **report.timings}) + "\n")
                reports.append(report)
                last = report.aggregate_record()
                log.info("round %d: IoU %.4f OA %.4f u_bar %.4f", t, last.iou, last.oa, last.u_bar)
    finally:
        if executor is not None:
            executor.shutdown()

    _write_outputs(out_dir, params, clients, reports, ctx)
    return ExperimentResult(out_dir, reports, initial, params, clients)


def _write_outputs(out_dir, params, clients, reports, ctx):
    ckpt = out_dir / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    save_parameters(ckpt / "global.ps", params)
    for state in clients:
        save_parameters(ckpt / f"client_{state.index}.ps", client_model(params, state, ctx), state.psi)
    final = reports[-1]
    summary = {
        "rounds": len(reports),
        "clients": [{"client": r.client, "iou": r.iou, "oa": r.oa, "u_bar": r.u_bar} for r in final.records],
        "total": {"iou": float(np.mean([r.iou for r in final.records])),
                  "oa": float(np.mean([r.oa for r in final.records]))},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
