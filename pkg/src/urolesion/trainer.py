"""Two-step transfer-learning orchestration under k-fold cross-validation.

Every training step has a warm phase (all layers trainable, low learning
rate) followed by a fine-tune phase in which only the last ``freeze_k``
parameterized layers are updated. Checkpoints carry the lineage of training
domains, e.g. ``ω(rand) -> ω(c) -> ω(u)`` for scenario 1.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .architectures import BACKBONES, NetworkSpec, build_network
from .checkpoint import (TAG_BOTH, TAG_CYS, TAG_RANDOM, TAG_URS, load_checkpoint, save_checkpoint, tags)
from .dataset import DatasetManifest, FoldSplit, Procedure, split_folds
from .errors import TrainingError
from .nn import AdamState, Network, adam_step, apply_freeze, unfreeze_all, zero_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    warm_epochs: int = 5
    warm_lr: float = 1e-4
    finetune_epochs: int = 30
    finetune_lr: float = 1e-3
    freeze_policy: str = "all_but_last_k"
    freeze_k: int = 4
    batch_size: int = 16
    seed: int = 0
    folds: int = 3
    fold_mode: str = "by_label"
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.warm_lr <= 0 or self.finetune_lr <= 0:
            raise TrainingError("learning rates must be positive")
        if self.warm_epochs < 0 or self.finetune_epochs < 0:
            raise TrainingError("epoch counts cannot be negative")
        if self.freeze_k < 3:
            raise TrainingError("freeze_k must keep the 3-layer head trainable (k >= 3)")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise TrainingError("batch sizes must be positive")
        if self.folds < 1:
            raise TrainingError("folds must be positive")


@dataclass(frozen=True)
class Scenario:
    id: int
    steps: tuple[tuple[Procedure, ...], ...]
    eval_domains: tuple[str, ...]


SCENARIOS = {
    1: Scenario(1, ((Procedure.CYS,), (Procedure.URS,)), ("CYS", "URS")),
    2: Scenario(2, ((Procedure.URS,), (Procedure.CYS,)), ("CYS", "URS")),
    3: Scenario(3, ((Procedure.CYS, Procedure.URS),), ("CYS", "URS", "CYS+URS")),
}
DOMAIN_TAGS = {"CYS": TAG_CYS, "URS": TAG_URS, "CYS+URS": TAG_BOTH}


def domain_name(procedures: Sequence[Procedure]) -> str:
    order = [p for p in (Procedure.CYS, Procedure.URS) if p in set(procedures)]
    return "+".join(p.value for p in order)


@dataclass
class RunRecord:
    arch: str
    scenario: int
    step: int
    fold: int
    train_domain: str
    start_checkpoint: str | None
    end_checkpoint: str | None
    start_provenance: list[str]
    end_provenance: list[str]
    start_hash: str
    end_hash: str
    loss_trace: dict[str, list[float]]
    train_ids: list[str]
    frozen_layers: list[str]
    frozen_checked: int
    frozen_violations: int
    evals: dict[str, dict[str, list]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        return cls(**d)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# one training step


def _frontier_features(network: Network, x: np.ndarray, batch_size: int) -> dict[str, np.ndarray]:
    names = network.frontier()
    if names == ["input"]:
        return {"input": x}
    chunks: dict[str, list[np.ndarray]] = {n: [] for n in names}
    for lo in range(0, len(x), batch_size):
        _, acts = network.forward(x[lo:lo + batch_size], training=False, capture=names, detach_params=True)
        for n in names:
            chunks[n].append(acts[n].data)
    return {n: np.concatenate(v) for n, v in chunks.items()}


def train_phase(network: Network, x: np.ndarray, y: np.ndarray, epochs: int, lr: float, batch_size: int,
                seed: int) -> list[float]:
    """Adam over shuffled mini-batches; returns the mean loss of each epoch.

    Activations that no trainable parameter can influence are computed once
    and reused across epochs.
    """
    if epochs == 0:
        return []
    params = network.named_parameters()
    n = len(y)
    if not network.frontier():
        # everything frozen: no update can happen, so every epoch has the same loss
        total = 0.0
        for lo in range(0, n, 64):
            out = network.forward(x[lo:lo + 64], training=False, detach_params=True)
            total += T.cross_entropy(out, y[lo:lo + 64]).item() * len(out.data)
        return [total / n] * epochs
    state = AdamState(lr=lr)
    feats = _frontier_features(network, x, max(batch_size, 64))
    trace = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            out = network.forward(None, training=True, precomputed={k: v[idx] for k, v in feats.items()})
            loss = T.cross_entropy(out, y[idx])
            T.backward(loss)
            adam_step(params, state)
            zero_grad(params)
            total += loss.item() * len(idx)
        trace.append(total / n)
    return trace


def _frozen_snapshot(network: Network) -> dict[str, bytes]:
    snap = {}
    for layer in network.parameterized_layers():
        if not layer.trainable:
            snap.update({f"{layer.name}/{k}": p.data.tobytes() for k, p in layer.params.items()})
            snap.update({f"{layer.name}/{k}": b.tobytes() for k, b in layer.buffers.items()})
    return snap


def run_step(network: Network, train: DatasetManifest, config: TrainConfig, tag: str,
             checkpoint_path: str | os.PathLike | None = None, seed: int = 0,
             start_checkpoint: str | None = None) -> tuple[Network, RunRecord]:
    """Warm phase then frozen fine-tune phase on ``train``; saves the result tagged ``tag``."""
    if len(train) == 0:
        raise TrainingError("training manifest is empty")
    if len(set(train.labels.tolist())) < 2:
        raise TrainingError("training manifest must contain both classes")
    x = train.images()
    if x.shape[1:] != network.input_shape:
        raise TrainingError(f"images are {x.shape[1:]}, network expects {network.input_shape}")
    x = x.astype(network.dtype, copy=False)
    y = train.one_hot().astype(network.dtype)
    start_prov = tags(network.provenance)
    start_hash = network.state_hash()

    unfreeze_all(network)
    warm = train_phase(network, x, y, config.warm_epochs, config.warm_lr, config.batch_size, derive_seed(seed, 1))

    mask = apply_freeze(network, config.freeze_policy, config.freeze_k)
    before = _frozen_snapshot(network)
    fine = train_phase(network, x, y, config.finetune_epochs, config.finetune_lr, config.batch_size,
                       derive_seed(seed, 2))
    after = _frozen_snapshot(network)
    violations = sum(before[k] != after[k] for k in before)
    unfreeze_all(network)

    end_prov = start_prov
    if checkpoint_path is not None:
        end_prov = tags(save_checkpoint(network, tag, checkpoint_path, dataset_hash=train.content_hash()))
    record = RunRecord(
        arch=network.spec.backbone if network.spec else network.name,
        scenario=0, step=0, fold=0, train_domain=domain_name(train.procedures),
        start_checkpoint=start_checkpoint,
        end_checkpoint=None if checkpoint_path is None else str(checkpoint_path),
        start_provenance=start_prov, end_provenance=end_prov,
        start_hash=start_hash, end_hash=network.state_hash(),
        loss_trace={"warm": warm, "finetune": fine}, train_ids=train.ids,
        frozen_layers=mask.frozen_layers(), frozen_checked=len(before), frozen_violations=violations,
    )
    return network, record


# ---------------------------------------------------------------------------
# scenarios


def domain_folds(manifests: Mapping[Procedure, DatasetManifest], config: TrainConfig) -> dict[Procedure, FoldSplit]:
    return {p: split_folds(m, config.folds, config.fold_mode, config.seed) for p, m in manifests.items()}


def _fold_parts(manifests, splits, procedures, fold, train: bool) -> DatasetManifest:
    out = DatasetManifest()
    for p in (Procedure.CYS, Procedure.URS):
        if p in procedures:
            idx = splits[p].train(fold) if train else splits[p].fold(fold)
            out = out + manifests[p].subset(idx)
    return out


def run_scenario(scenario: int | Scenario, manifests: Mapping[Procedure | str, DatasetManifest],
                 config: TrainConfig, init_checkpoint: str | os.PathLike, out_dir: str | os.PathLike,
                 folds: Sequence[int] | None = None) -> list[RunRecord]:
    """All folds of one scenario, starting every fold from ``init_checkpoint``."""
    from .metrics import evaluate

    sc = SCENARIOS[scenario] if isinstance(scenario, int) else scenario
    manifests = {Procedure(p): m for p, m in manifests.items()}
    for p in (Procedure.CYS, Procedure.URS):
        if p not in manifests or len(manifests[p]) == 0:
            raise TrainingError(f"scenario {sc.id} needs a non-empty {p.value} manifest")
    splits = domain_folds(manifests, config)
    out_dir = Path(out_dir)
    records = []
    for fold in (range(config.folds) if folds is None else folds):
        net, _ = load_checkpoint(init_checkpoint)
        start = str(init_checkpoint)
        heldout = {
            "CYS": _fold_parts(manifests, splits, {Procedure.CYS}, fold, train=False),
            "URS": _fold_parts(manifests, splits, {Procedure.URS}, fold, train=False),
        }
        heldout["CYS+URS"] = heldout["CYS"] + heldout["URS"]
        for step, procs in enumerate(sc.steps, start=1):
            train = _fold_parts(manifests, splits, set(procs), fold, train=True)
            dname = domain_name(procs)
            ckpt = out_dir / f"fold{fold}" / f"step{step}.ckpt"
            log.info("%s scenario %d fold %d step %d: training on %s (%d frames)",
                     net.spec.backbone, sc.id, fold, step, dname, len(train))
            net, rec = run_step(net, train, config, DOMAIN_TAGS[dname], ckpt,
                                seed=derive_seed(config.seed, sc.id, fold, step), start_checkpoint=start)
            rec.scenario, rec.step, rec.fold = sc.id, step, fold
            for dom in sc.eval_domains:
                scored = evaluate(net, heldout[dom], config.eval_batch_size, domain=dom, fold=fold)
                rec.evals[dom] = {
                    "ids": [s.sample_id for s in scored],
                    "labels": [s.label for s in scored],
                    "scores": [s.score for s in scored],
                }
            records.append(rec)
            # the next step starts from the weights as stored on disk
            net, _ = load_checkpoint(ckpt, expected_spec=net.spec)
            start = str(ckpt)
    return records


# ---------------------------------------------------------------------------
# experiment bundle


BUNDLE_FILE = "bundle.json"
RECORDS_FILE = "records.json"


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _relativize(records: list[RunRecord], root: Path) -> list[dict]:
    out = []
    for r in records:
        d = r.to_dict()
        for key in ("start_checkpoint", "end_checkpoint"):
            if d[key] is not None:
                d[key] = Path(os.path.relpath(d[key], root)).as_posix()
        out.append(d)
    return out


@dataclass
class ExperimentBundle:
    root: Path
    meta: dict
    records: list[RunRecord]

    def select(self, **criteria) -> list[RunRecord]:
        return [r for r in self.records if all(getattr(r, k) == v for k, v in criteria.items())]


def initial_checkpoint(spec: NetworkSpec, path: str | os.PathLike, seed: int,
                       source: str | os.PathLike | None = None) -> str:
    """Write the starting weights for an architecture.

    With ``source`` (e.g. a checkpoint tagged ``ω(i)``) its bytes are copied;
    otherwise a He-uniform initialisation is saved under ``ω(rand)``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if source is not None:
        load_checkpoint(source, expected_spec=spec)
        path.write_bytes(Path(source).read_bytes())
    else:
        save_checkpoint(build_network(spec, seed), TAG_RANDOM, path)
    return str(path)


def _scenario_job(args) -> list[dict]:
    arch, sc, manifests, config, init, out_dir, root = args
    records = run_scenario(sc, manifests, config, init, out_dir)
    rel = _relativize(records, Path(root))
    _dump_json(Path(out_dir) / RECORDS_FILE, rel)
    return rel


def run_matrix(archs: Sequence[str], scenarios: Sequence[int], manifests: Mapping[Procedure | str, DatasetManifest],
               config: TrainConfig, spec_template: NetworkSpec, out_dir: str | os.PathLike, jobs: int = 1,
               init_checkpoints: Mapping[str, str] | None = None, extra_meta: Mapping | None = None
               ) -> ExperimentBundle:
    """Train every (architecture, scenario) pair and persist the bundle directory.

    Layout: ``bundle.json`` at the root, ``<arch>/init.ckpt``,
    ``<arch>/scenario<s>/fold<f>/step<k>.ckpt`` and
    ``<arch>/scenario<s>/records.json``.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for a in archs:
        if a not in BACKBONES:
            raise TrainingError(f"unknown architecture {a!r}")
    for s in scenarios:
        if s not in SCENARIOS:
            raise TrainingError(f"unknown scenario {s!r}")
    meta = {
        "archs": list(archs),
        "scenarios": [int(s) for s in scenarios],
        "folds": config.folds,
        "train_config": asdict(config),
        "network": spec_template.to_dict(),
        "datasets": {Procedure(p).value: m.content_hash() for p, m in manifests.items()},
    }
    if extra_meta:
        meta.update(extra_meta)
    _dump_json(root / BUNDLE_FILE, meta)

    jobs_args = []
    for a in archs:
        spec = NetworkSpec(a, spec_template.input_resolution, spec_template.width_scale,
                           spec_template.inception_variant, spec_template.dtype)
        source = (init_checkpoints or {}).get(a)
        init = initial_checkpoint(spec, root / a / "init.ckpt", derive_seed(config.seed, BACKBONES.index(a)),
                                  source)
        for s in scenarios:
            jobs_args.append((a, int(s), manifests, config, init, str(root / a / f"scenario{s}"), str(root)))

    results: list[list[dict]]
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_scenario_job, jobs_args))
    else:
        results = [_scenario_job(a) for a in jobs_args]
    records = [RunRecord.from_dict(d) for chunk in results for d in chunk]
    return ExperimentBundle(root, meta, records)


def load_bundle(path: str | os.PathLike) -> ExperimentBundle:
    root = Path(path)
    meta_path = root / BUNDLE_FILE
    if not meta_path.is_file():
        raise FileNotFoundError(f"no {BUNDLE_FILE} in {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    records = []
    for arch in meta.get("archs", []):
        for s in meta.get("scenarios", []):
            rp = root / arch / f"scenario{s}" / RECORDS_FILE
            if rp.is_file():
                records.extend(RunRecord.from_dict(d) for d in json.loads(rp.read_text(encoding="utf-8")))
    return ExperimentBundle(root, meta, records)
