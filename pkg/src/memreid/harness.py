"""Training loop, evaluation glue, ablation grid runner and report writer.

One training iteration over a batch of scenes:

1. crop every ground-truth person and encode the labeled ones with the
   online parameters (these are the anchors);
2. score each anchor against the memory bank and take the mean loss over
   anchors; an SGD step on the online parameters follows;
3. fold the new online parameters into the moving average;
4. encode all persons of the batch with the averaged parameters and push
   them into the labeled / unlabeled queues.

Anchors are therefore never compared against their own fresh copies. The
``oim`` loss kind swaps the queues for the per-identity look-up table plus
an unlabeled queue filled with online features.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import Dataset, DetectionNoise, detect_gallery
from .ema import DualEncoderState, ema_update, init_dual
from .evalproto import EvalConfig, EvalReport, GalleryScene, evaluate, gallery_sweep
from .loss import anchor_gradient, oim_loss, pairwise_loss
from .memory import FeatureEntry, LookupTable, MemoryBank, cosine_similarities
from .model import EncoderConfig, EncoderNet, FeatureEncoder, roi_extract

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "memreid-checkpoint/1"


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    L: int = 256
    U: int = 256
    m: float = 0.999
    gamma: float = 16.0
    batch_size: int = 3
    epochs: int = 24
    base_lr: float = 0.0
    warmup_iters: int = 500
    warmup_target: float = 3e-3
    lr_milestones: tuple = (16, 22)  # epochs
    lr_decays: tuple = (0.1, 0.1)    # multiplicative, one per milestone
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss_kind: str = "pairwise"
    oim_temperature: Optional[float] = None  # defaults to 1 / gamma
    lut_momentum: float = 0.5
    d: int = 128
    roi_size: tuple = (16, 16)
    widths: tuple = (16, 32)

    def __post_init__(self):
        if self.loss_kind not in ("pairwise", "oim"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.L < 0 or self.U < 0:
            raise ValueError("queue sizes must be non-negative")
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("momentum m must lie in [0, 1]")
        for name in ("gamma", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.lr_milestones) != len(self.lr_decays):
            raise ValueError("lr_milestones and lr_decays must have equal length")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ValueError("lr_milestones must be ascending")
        if self.warmup_iters < 0 or self.base_lr < 0 or self.warmup_target < 0:
            raise ValueError("learning-rate settings must be non-negative")

    @property
    def temperature(self) -> float:
        return self.oim_temperature if self.oim_temperature is not None else 1.0 / self.gamma

    def encoder_config(self, channels: int = 3) -> EncoderConfig:
        return EncoderConfig(d=self.d, roi_size=tuple(self.roi_size), channels=channels,
                             widths=tuple(self.widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lr_milestones", "lr_decays", "roi_size", "widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("lr_milestones", "lr_decays", "roi_size", "widths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# Queue/optimizer settings reported for the full-size benchmarks; the
# encoder stays desk-sized since the large backbone is not part of this package.
PROFILES = {
    "desk": TrainConfig(),
    "cuhk": TrainConfig(L=4096, U=4096, m=0.999, gamma=16.0, batch_size=3, epochs=12,
                        base_lr=0.0, warmup_iters=500, warmup_target=1e-3,
                        lr_milestones=(8, 11), lr_decays=(0.1, 0.1),
                        sgd_momentum=0.9, weight_decay=5e-4),
    "prw": TrainConfig(L=1024, U=0, m=0.999, gamma=16.0, batch_size=3, epochs=12,
                       base_lr=0.0, warmup_iters=500, warmup_target=1e-3,
                       lr_milestones=(8, 11), lr_decays=(0.1, 0.1),
                       sgd_momentum=0.9, weight_decay=5e-4),
}


def matched_oim_config(config: TrainConfig, n_table: int) -> TrainConfig:
    """OIM counterpart storing as many feature vectors as ``config``.

    The look-up table holds ``n_table`` proxies, so the unlabeled queue gets
    ``L + U - n_table`` slots (floored at zero).
    """
    return replace(config, loss_kind="oim", U=max(0, config.L + config.U - int(n_table)))


def lr_at(config: TrainConfig, iteration: int, epoch: int) -> float:
    """Linear warm-up from ``base_lr`` to ``warmup_target``, then step decay."""
    if iteration < config.warmup_iters:
        frac = iteration / config.warmup_iters
        return config.base_lr + (config.warmup_target - config.base_lr) * frac
    lr = config.warmup_target
    for milestone, factor in zip(config.lr_milestones, config.lr_decays):
        if epoch >= milestone:
            lr *= factor
    return lr


@dataclass
class RunRecord:
    config: dict
    seed: int
    losses: list = field(default_factory=list)
    anchors_total: int = 0
    anchors_with_positives: int = 0
    status: str = "ok"
    message: str = ""
    reports: dict = field(default_factory=dict)  # "full" -> EvalReport, "sweep" -> [EvalReport]
    wall_time: float = field(default=0.0, compare=False)

    def fingerprint(self) -> str:
        """Digest of everything except wall time."""
        payload = {k: v for k, v in asdict(self).items() if k != "wall_time"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=repr).encode()).hexdigest()


@dataclass
class Checkpoint:
    config: TrainConfig
    encoder: EncoderConfig
    state: DualEncoderState
    bank: MemoryBank
    table: LookupTable
    iteration: int

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"format": CHECKPOINT_FORMAT, "config": self.config.to_dict(),
                  "encoder": self.encoder.to_dict(), "iteration": self.iteration,
                  "momentum": self.state.momentum,
                  "parameter_order": [n for n, _ in FeatureEncoder(self.encoder)._shapes]}
        arrays = {"header": np.array(json.dumps(header)),
                  "theta": self.state.online, "theta_bar": self.state.average}
        arrays.update({f"bank/{k}": v for k, v in self.bank.state_dict().items()})
        arrays.update({f"lut/{k}": v for k, v in self.table.state_dict().items()})
        with path.open("wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(Path(path)) as z:
            header = json.loads(str(z["header"]))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"not a checkpoint: {header.get('format')}")
            bank = MemoryBank.from_state_dict({k[5:]: z[k] for k in z.files if k.startswith("bank/")})
            lut = {k[4:]: z[k] for k in z.files if k.startswith("lut/")}
            state = DualEncoderState(z["theta"].copy(), z["theta_bar"].copy(), float(header["momentum"]))
        return cls(TrainConfig.from_dict(header["config"]), EncoderConfig.from_dict(header["encoder"]),
                   state, bank, LookupTable.from_state_dict(lut), int(header["iteration"]))


def scene_patches(scene, roi_size) -> np.ndarray:
    return np.stack([roi_extract(scene, a.box, roi_size) for a in scene.annotations])


def _train_cache(dataset: Dataset, encoder: FeatureEncoder):
    cache = []
    for scene in dataset.train:
        if not scene.annotations:
            cache.append((None, np.zeros(0, dtype=np.int64)))
            continue
        x = encoder.to_tensor(scene_patches(scene, encoder.cfg.roi_size))
        ids = np.array([-1 if a.identity is None else a.identity for a in scene.annotations],
                       dtype=np.int64)
        cache.append((x, ids))
    return cache


def _pairwise_step(anchors: np.ndarray, ids: np.ndarray, bank: MemoryBank, gamma: float):
    grads = np.zeros_like(anchors)
    values = np.zeros(len(anchors))
    with_pos = 0
    for i, (a, identity) in enumerate(zip(anchors, ids)):
        pos, neg = bank.split_pairs(int(identity))
        with_pos += bool(len(pos))
        res = pairwise_loss(cosine_similarities(a, pos), cosine_similarities(a, neg), gamma)
        values[i] = res.value
        grads[i] = anchor_gradient(res, pos, neg)
    return values, grads, with_pos


def _oim_step(anchors, ids, table: LookupTable, unlabeled: np.ndarray, temperature: float):
    grads = np.zeros_like(anchors)
    values = np.zeros(len(anchors))
    with_pos = 0
    for i, (a, identity) in enumerate(zip(anchors, ids)):
        if int(identity) not in table:
            continue
        with_pos += 1
        values[i], grads[i] = oim_loss(a, table, unlabeled, int(identity), temperature)
    return values, grads, with_pos


def train(config: TrainConfig, dataset: Dataset, log_every: int = 0):
    """Train on ``dataset.train``; returns ``(Checkpoint, RunRecord)``.

    Raises :class:`TrainingAborted` (carrying the partial record) when the
    loss turns non-finite.
    """
    torch.manual_seed(config.seed)
    enc_cfg = config.encoder_config(dataset.spec.channels)
    encoder = FeatureEncoder(enc_cfg)
    net = EncoderNet(enc_cfg)
    encoder.load(net, encoder.init_params(config.seed))
    avg_net = EncoderNet(enc_cfg).requires_grad_(False)
    state = init_dual(encoder.vector(net), config.m)
    encoder.load(avg_net, state.average)

    opt = torch.optim.SGD(net.parameters(), lr=lr_at(config, 0, 0),
                          momentum=config.sgd_momentum, weight_decay=config.weight_decay)
    oim = config.loss_kind == "oim"
    bank = MemoryBank(config.d, 0 if oim else config.L, config.U)
    table = LookupTable(config.lut_momentum)
    cache = _train_cache(dataset, encoder)
    rng = np.random.default_rng([config.seed, 7])

    record = RunRecord(config=config.to_dict(), seed=config.seed)
    start = time.perf_counter()

    def abort(message):
        record.status, record.message = "aborted", message
        record.wall_time = time.perf_counter() - start
        raise TrainingAborted(message, record)

    it = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(cache))
        for b in range(0, len(order), config.batch_size):
            parts = [cache[i] for i in order[b:b + config.batch_size] if cache[i][0] is not None]
            if not parts:
                log.warning("iteration %d: empty batch skipped", it)
                it += 1
                continue
            x = torch.cat([p[0] for p in parts])
            ids = np.concatenate([p[1] for p in parts])
            lab = ids >= 0

            lr = lr_at(config, it, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            if oim:
                emb = net(x)
                online = emb.detach().numpy()
                if not np.all(np.isfinite(online)):
                    abort(f"non-finite embeddings at iteration {it}")
                _, _, unl = bank.snapshot()
                values, grads, with_pos = _oim_step(online[lab], ids[lab], table, unl,
                                                    config.temperature)
                full = np.zeros_like(online)
                full[lab] = grads
                grads = full
            else:
                emb = net(x[torch.from_numpy(lab)]) if lab.any() else None
                if emb is not None and not torch.isfinite(emb).all():
                    abort(f"non-finite embeddings at iteration {it}")
                if emb is not None:
                    values, grads, with_pos = _pairwise_step(emb.detach().numpy(), ids[lab],
                                                             bank, config.gamma)
                else:
                    values, grads, with_pos = np.zeros(0), None, 0

            n_anchor = int(lab.sum())
            loss = float(values.mean()) if n_anchor else 0.0
            if not math.isfinite(loss):
                abort(f"non-finite loss at iteration {it}")
            record.losses.append(loss)
            record.anchors_total += n_anchor
            record.anchors_with_positives += with_pos

            if n_anchor:
                opt.zero_grad()
                emb.backward(torch.from_numpy(grads / n_anchor))
                opt.step()
            theta = encoder.vector(net)
            if not np.all(np.isfinite(theta)):
                abort(f"non-finite parameters after step at iteration {it}")
            state = ema_update(state, theta)
            encoder.load(avg_net, state.average)

            if oim:
                for f, identity in zip(online[lab], ids[lab]):
                    table.update(int(identity), f)
                bank.enqueue(FeatureEntry(f, None, it) for f in online[~lab])
            else:
                with torch.no_grad():
                    mem = avg_net(x).numpy()
                if not np.all(np.isfinite(mem)):
                    abort(f"non-finite memory features at iteration {it}")
                bank.enqueue(FeatureEntry(f, None if i < 0 else int(i), it) for f, i in zip(mem, ids))
            if log_every and it % log_every == 0:
                log.info("epoch %d iter %d lr %.4g loss %.4f |Ql|=%d |Qu|=%d", epoch, it, lr, loss,
                         len(bank.labeled), len(bank.unlabeled))
            it += 1
    record.wall_time = time.perf_counter() - start
    ckpt = Checkpoint(config, enc_cfg, state, bank, table, it)
    return ckpt, record


def featurize(encoder: FeatureEncoder, params, dataset: Dataset, detections: dict):
    """Query features from query GT boxes; gallery features from detections."""
    roi = encoder.cfg.roi_size
    q_patches = np.stack([roi_extract(dataset.query_scenes[q.scene_id], q.box, roi)
                          for q in dataset.queries])
    q_feats = encoder.encode(params, q_patches)
    gallery = []
    for scene in dataset.gallery:
        dets = detections.get(scene.scene_id, [])
        boxes = [b for b, _ in dets]
        if boxes:
            feats = encoder.encode(params, np.stack([roi_extract(scene, b, roi) for b in boxes]))
        else:
            feats = np.zeros((0, encoder.cfg.d))
        gallery.append(GalleryScene(scene.scene_id, boxes, feats))
    return q_feats, gallery


def evaluate_checkpoint(ckpt: Checkpoint, dataset: Dataset, noise: DetectionNoise = DetectionNoise(),
                        eval_config: EvalConfig = EvalConfig(), sweep: bool = True,
                        use_average: bool = False, seed: int = 0) -> dict:
    encoder = FeatureEncoder(ckpt.encoder)
    params = ckpt.state.average if use_average else ckpt.state.online
    q_feats, gallery = featurize(encoder, params, dataset, detect_gallery(dataset, noise))
    gt = dataset.gallery_gt
    out = {"full": evaluate(dataset.queries, q_feats, gallery, gt, eval_config)}
    if sweep:
        sizes = [s for s in eval_config.gallery_sizes if s <= len(gallery)]
        out["sweep"] = gallery_sweep(dataset.queries, q_feats, gallery, gt, sizes, eval_config, seed)
    return out


def train_and_evaluate(config: TrainConfig, dataset: Dataset, noise: DetectionNoise = DetectionNoise(),
                       eval_config: EvalConfig = EvalConfig()):
    ckpt, record = train(config, dataset)
    record.reports = evaluate_checkpoint(ckpt, dataset, noise, eval_config, seed=config.seed)
    return ckpt, record


@dataclass
class AblationRow:
    key: dict
    record: Optional[RunRecord]
    error: str = ""


def _run_cell(args):
    base, overrides, dataset, noise, eval_config = args
    config = replace(base, **overrides)
    try:
        _, record = train_and_evaluate(config, dataset, noise, eval_config)
        return AblationRow(overrides, record)
    except TrainingAborted as exc:
        return AblationRow(overrides, exc.record, str(exc))
    except Exception as exc:  # one failing cell must not stop the grid
        log.exception("ablation cell %s failed", overrides)
        return AblationRow(overrides, None, f"{type(exc).__name__}: {exc}")


def expand_grid(grid: dict, seeds: Sequence[int]) -> list:
    names = list(grid)
    cells = []
    for values in itertools.product(*(grid[n] for n in names)):
        for seed in seeds:
            cells.append({**dict(zip(names, values)), "seed": int(seed)})
    return cells


def run_ablation(grid: dict, base: TrainConfig, dataset: Dataset, seeds: Sequence[int],
                 noise: DetectionNoise = DetectionNoise(), eval_config: EvalConfig = EvalConfig(),
                 n_jobs: int = 1) -> list:
    """Train and evaluate every (grid cell, seed); grid keys are TrainConfig
    field names (typically L, U, m, loss_kind)."""
    if not seeds:
        raise ValueError("need at least one seed")
    allowed = {f.name for f in fields(TrainConfig)}
    bad = set(grid) - allowed
    if bad:
        raise ValueError(f"grid keys are not TrainConfig fields: {sorted(bad)}")
    jobs = [(base, cell, dataset, noise, eval_config) for cell in expand_grid(grid, seeds)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


# --- reporting ---------------------------------------------------------------

KEY_COLUMNS = ("L", "U", "m", "loss_kind", "seed")


def _key_of(row: AblationRow) -> dict:
    cfg = row.record.config if row.record else {}
    return {k: row.key.get(k, cfg.get(k, "")) for k in KEY_COLUMNS}


def report(rows: Sequence[AblationRow], out_dir) -> dict:
    """Write ablation.csv, gallery_sweep.csv, momentum_table.csv and
    summary.txt; returns their paths."""
    import csv

    if not rows:
        raise ValueError("need at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*KEY_COLUMNS, "mAP", "rank1", "final_loss", "positive_anchor_rate", "status"])
        for row in rows:
            rec, key = row.record, _key_of(row)
            full = rec.reports.get("full") if rec else None
            w.writerow([*key.values(),
                        repr(full.mAP) if full else "", repr(full.cmc.get(1, "")) if full else "",
                        repr(rec.losses[-1]) if rec and rec.losses else "",
                        repr(rec.anchors_with_positives / max(rec.anchors_total, 1)) if rec else "",
                        "ok" if full and not row.error else (row.error or "no-eval")])
    paths["ablation"] = out / "ablation.csv"

    with (out / "gallery_sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*KEY_COLUMNS, "gallery_size", "mAP", "rank1"])
        for row in rows:
            if not row.record:
                continue
            for rep in row.record.reports.get("sweep", []):
                w.writerow([*_key_of(row).values(), rep.gallery_size, repr(rep.mAP),
                            repr(rep.cmc.get(1, ""))])
    paths["gallery_sweep"] = out / "gallery_sweep.csv"

    table = momentum_table(rows)
    if table:
        ms = sorted(table)
        with (out / "momentum_table.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", *ms])
            w.writerow(["Rank-1", *(f"{100 * table[m]['rank1']:.1f}" for m in ms)])
            w.writerow(["mAP", *(f"{100 * table[m]['mAP']:.1f}" for m in ms)])
        paths["momentum_table"] = out / "momentum_table.csv"

    lines = [f"{len(rows)} run(s)"]
    for group, vals in summarize_groups(rows).items():
        desc = ", ".join(f"{k}={v}" for k, v in zip(KEY_COLUMNS[:-1], group))
        lines.append(f"{desc}: mAP {100 * vals['mAP']:.2f}  rank-1 {100 * vals['rank1']:.2f}  "
                     f"(n={vals['n']})")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    paths["summary"] = out / "summary.txt"
    return paths


def summarize_groups(rows: Sequence[AblationRow]) -> dict:
    """Mean mAP / rank-1 over seeds keyed by (L, U, m, loss_kind)."""
    acc = {}
    for row in rows:
        if not row.record or "full" not in row.record.reports:
            continue
        key = tuple(_key_of(row)[k] for k in KEY_COLUMNS[:-1])
        full = row.record.reports["full"]
        acc.setdefault(key, []).append((full.mAP, full.cmc.get(1, float("nan"))))
    return {k: {"mAP": float(np.mean([v[0] for v in vals])),
                "rank1": float(np.mean([v[1] for v in vals])), "n": len(vals)}
            for k, vals in acc.items()}


def momentum_table(rows: Sequence[AblationRow]) -> dict:
    """m -> mean mAP / rank-1 over seeds, or {} when m was not swept."""
    per_m = {}
    for row in rows:
        if not row.record or "full" not in row.record.reports or "m" not in row.key:
            continue
        full = row.record.reports["full"]
        per_m.setdefault(row.key["m"], []).append((full.mAP, full.cmc.get(1, float("nan"))))
    return {m: {"mAP": float(np.mean([v[0] for v in vals])),
                "rank1": float(np.mean([v[1] for v in vals]))} for m, vals in per_m.items()}


def save_record(record: RunRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record_to_dict(record), indent=1))
    return path


def _report_dict(rep: EvalReport) -> dict:
    return {"mAP": rep.mAP, "cmc": {str(k): v for k, v in rep.cmc.items()},
            "gallery_size": rep.gallery_size,
            "per_query_ap": {str(k): v for k, v in rep.per_query_ap.items()},
            "excluded": rep.excluded}


def record_to_dict(record: RunRecord) -> dict:
    reports = {}
    for name, rep in record.reports.items():
        reports[name] = [_report_dict(r) for r in rep] if isinstance(rep, list) else _report_dict(rep)
    return {"config": record.config, "seed": record.seed, "losses": record.losses,
            "anchors_total": record.anchors_total,
            "anchors_with_positives": record.anchors_with_positives,
            "status": record.status, "message": record.message,
            "wall_time": record.wall_time, "reports": reports,
            "fingerprint": record.fingerprint()}
