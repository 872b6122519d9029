"""End-to-end run: federated training, noise synthesis, disentangle, unlearn, repair, audit.

Every phase persists its artifacts under ``<output_dir>/seed_<s>/`` and is
recorded in ``state.json`` together with a key derived from the config
fields it depends on. Re-running skips completed phases; a different config
hash aborts instead of mixing results.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence


from . import baselines as bl
from .config import ExperimentConfig
from .data import ClientPartition, ImageSet, client_class_indices, load_dataset, load_partitions, \
    partition_iid, save_partitions
from .disentangle import run_disentangle
from .fedsim import accuracy, run_federation
from .metrics import AuditReport, audit, predict_logits
from .models import build_model, flatten_params, model_from_checkpoint, model_header, save_checkpoint
from .noise import NoiseBundle, NoiseConfig, NoiseMatrix, forge_forget_proxies, forge_retain_proxies, \
    load_bundle, save_bundle
from .repair import RepairGate, aggregate_retain_proxies, run_repair
from .runlog import CsvLog, metrics_log
from .unlearn import TRACE_FIELDS, gradient_mask, make_teachers, mask_hash, run_unlearn

log = logging.getLogger(__name__)

PHASES = ("train", "retrain", "noise", "disentangle", "unlearn", "repair", "baselines", "audit")


class PipelineError(RuntimeError):
    def __init__(self, phase: str, message: str):
        super().__init__(f"phase '{phase}' failed: {message}")
        self.phase = phase


class StateMismatch(RuntimeError):
    pass


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def phase_keys(cfg: ExperimentConfig, seed: int) -> dict[str, str]:
    """Chained digests: a phase's key covers its own inputs and every earlier phase's."""
    d = cfg.to_dict()
    own = {
        "train": [d["dataset"], d["arch"], d["fed"], seed],
        "retrain": [d["forget"]],
        "noise": [d["noise"], d["ablation"]["real_data"]],
        "disentangle": [d["disentangle"], d["ablation"]["disentangle"]],
        "unlearn": [d["unlearn"], d["ablation"]],
        "repair": [d["repair"]],
        "baselines": [d["baselines"], d["baseline"]],
        "audit": [d["audit"]],
    }
    keys, prev = {}, ""
    for p in PHASES:
        prev = _digest([prev, own[p]])
        keys[p] = prev
    return keys


@dataclass
class RunState:
    config_hash: str
    seed: int
    completed: dict[str, str] = field(default_factory=dict)   # phase -> key
    timings: dict[str, float] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "RunState":
        return cls(**json.loads(path.read_text()))

    def save(self, path: Path) -> None:
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        tmp.replace(path)


def real_bundle(data: ImageSet, partitions: Sequence[ClientPartition], classes_by_client: dict[int, Sequence[int]],
                split: str, batch_size: int) -> NoiseBundle:
    """Real samples packaged like a proxy bundle (the real-data ablation)."""
    mats, weights = [], {}
    parts = {p.client_id: p for p in partitions}
    for cid, classes in sorted(classes_by_client.items()):
        held = 0
        for c in sorted(classes):
            idx = client_class_indices(data, parts[cid], c)
            if idx:
                sub = data.subset(idx)
                mats.append(NoiseMatrix(sub.x.clone(), sub.y.clone(), cid, split, batch_size))
                held += len(idx)
        if held:
            weights[cid] = float(held)
    return NoiseBundle(mats, split, weights if split == "retain" else {})


@dataclass
class RunResult:
    run_dir: Path
    reports: dict[str, AuditReport]
    state: RunState


class Run:
    """One seed of one experiment config."""

    def __init__(self, cfg: ExperimentConfig, seed: int, reuse_from: str | Path | None = None,
                 data_root: str | None = None):
        self.cfg, self.seed = cfg, seed
        self.dir = Path(cfg.output_dir) / f"seed_{seed}"
        self.reuse_dir = Path(reuse_from) / f"seed_{seed}" if reuse_from else None
        self.data_root = data_root
        self.keys = phase_keys(cfg, seed)
        self.metrics: CsvLog | None = None
        self._data = None

    # -- bookkeeping ----------------------------------------------------------------

    @property
    def state_path(self) -> Path:
        return self.dir / "state.json"

    def _open_state(self) -> RunState:
        self.dir.mkdir(parents=True, exist_ok=True)
        h = self.cfg.hash()
        if self.state_path.exists():
            st = RunState.load(self.state_path)
            if st.config_hash != h:
                raise StateMismatch(f"{self.dir} holds a run of config {st.config_hash}, not {h}; "
                                    "use a fresh output_dir")
            return st
        st = RunState(h, self.seed)
        st.save(self.state_path)
        (self.dir / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1))
        return st

    def _reusable(self, phase: str) -> bool:
        if self.reuse_dir is None or not (self.reuse_dir / "state.json").exists():
            return False
        other = RunState.load(self.reuse_dir / "state.json")
        return other.completed.get(phase) == self.keys[phase]

    def path(self, name: str) -> Path:
        return self.dir / name

    @property
    def data(self):
        if self._data is None:
            self._data = load_dataset(self.cfg.dataset, self.data_root)
        return self._data

    def _model(self, name: str):
        return model_from_checkpoint(self.path(name))[0]

    # -- phases ---------------------------------------------------------------------

    ARTIFACTS = {
        "train": ["partitions.json", "origin.ckpt"],
        "retrain": ["retrained.ckpt"],
        "noise": ["noise_forget.json", "noise_forget.safetensors", "noise_retain.json", "noise_retain.safetensors"],
        "disentangle": ["disentangled.ckpt", "disentangle.json"],
    }

    def _phase_train(self, st: RunState):
        train, test, man = self.data
        fed = self.cfg.fed_config(self.seed)
        parts = partition_iid(train, fed.n_clients, self.seed)
        save_partitions(parts, self.path("partitions.json"))
        run = run_federation(fed, train, parts, self.cfg.arch, man.num_classes, test=test,
                             metrics=self.metrics, phase="train")
        model = build_model(self.cfg.arch, man.num_classes, man.input_shape[0], man.input_shape[1], seed=self.seed)
        model.load_state_dict(run.final_global)
        save_checkpoint(model, self.path("origin.ckpt"), model_header(model, seed=self.seed, rounds=fed.rounds))

    def _phase_retrain(self, st: RunState):
        train, test, man = self.data
        fed = self.cfg.fed_config(self.seed)
        parts = load_partitions(self.path("partitions.json"))
        run = bl.retrain_from_scratch(self.cfg.arch, train, parts, self.cfg.forget_classes(), fed, man.num_classes,
                                      test=test, metrics=self.metrics, phase="retrain")
        model = build_model(self.cfg.arch, man.num_classes, man.input_shape[0], man.input_shape[1], seed=self.seed)
        model.load_state_dict(run.final_global)
        save_checkpoint(model, self.path("retrained.ckpt"), model_header(model, seed=self.seed, method="retrain"))

    def _phase_noise(self, st: RunState):
        train, _, man = self.data
        origin = self._model("origin.ckpt")
        parts = load_partitions(self.path("partitions.json"))
        reqs = self.cfg.requests()
        forget = set(self.cfg.forget_classes())
        retain_classes = [c for c in range(man.num_classes) if c not in forget]
        ncfg = NoiseConfig(**{**asdict(self.cfg.noise), "seed": self.seed})
        by_client = {r.client_id: sorted(r.forget_classes) for r in reqs}
        if self.cfg.ablation.real_data:
            nf = real_bundle(train, parts, by_client, "forget", ncfg.batch_size)
            nr = real_bundle(train, parts, {p.client_id: retain_classes for p in parts}, "retain", ncfg.batch_size)
        else:
            nf = forge_forget_proxies(origin, reqs, ncfg, man.input_shape, train, parts)
            # retain proxies come from every client, sized by what each still holds
            nr = forge_retain_proxies(origin, parts, retain_classes, ncfg, man.input_shape, train)
        if nf.empty:
            raise ValueError("no client holds any sample of the forgotten classes")
        save_bundle(nf, self.path("noise_forget"))
        save_bundle(nr, self.path("noise_retain"))
        for m in nf.matrices:
            self.metrics.append(phase="noise", step=m.owner_client, metric=f"final_loss/class{m.class_label}",
                                value=m.loss_trace[-1] if m.loss_trace else float("nan"))

    def _per_class_acc(self, model, classes) -> dict[int, float]:
        _, test, _ = self.data
        pred = predict_logits(model, test).argmax(1)
        out = {}
        for c in classes:
            mask = test.y == c
            out[int(c)] = (pred[mask] == c).double().mean().item() * 100 if mask.any() else float("nan")
        return out

    def _phase_disentangle(self, st: RunState):
        _, _, man = self.data
        model = self._model("origin.ckpt")
        nf = load_bundle(self.path("noise_forget"))
        forget = set(self.cfg.forget_classes())
        others = [c for c in range(man.num_classes) if c not in forget]
        before = self._per_class_acc(model, others)
        trace = []
        dc = self.cfg.disentangle
        if self.cfg.ablation.disentangle and dc.epochs > 0:
            trace = run_disentangle(model, nf, dc.epochs, dc.lr, dc.alpha, dc.retention, self.metrics)
        after = self._per_class_acc(model, others)
        save_checkpoint(model, self.path("disentangled.ckpt"), model_header(model, seed=self.seed))
        self.path("disentangle.json").write_text(json.dumps(
            {"loss": trace, "non_target_acc_before": before, "non_target_acc_after": after}, indent=1))

    def _phase_unlearn(self, st: RunState):
        origin = self._model("origin.ckpt")
        model = self._model("disentangled.ckpt")
        nf = load_bundle(self.path("noise_forget"))
        hyper = self.cfg.unlearn_hyper()
        # omega_ref is the global model before disentanglement
        ref = flatten_params(origin)
        mask = gradient_mask(origin, nf, hyper.mask_quantile) if hyper.use_mask else None
        teachers = make_teachers(model, hyper.n_teachers, hyper.teacher_seed + self.seed)
        trace_path = self.path("unlearn_trace.csv")
        trace_path.unlink(missing_ok=True)
        trace = CsvLog(trace_path, TRACE_FIELDS)
        ref_model = origin if hyper.freeze_y_fake else None
        run_unlearn(model, ref, teachers, nf, hyper, mask, trace, ref_model)
        trace.touch()
        save_checkpoint(model, self.path("unlearned.ckpt"), model_header(model, seed=self.seed))
        if mask is not None:
            st.info["mask_hash"] = mask_hash(mask)
            st.info["mask_kept_fraction"] = float(mask.mean())

    def _client_retain_acc(self, model, parts) -> dict[int, float]:
        train, _, _ = self.data
        forget = self.cfg.forget_classes()
        keep = ~train.class_mask(forget)
        out = {}
        for p in parts:
            idx = [i for i in p.sample_indices if bool(keep[i])]
            if idx:
                out[p.client_id] = accuracy(model, train.subset(idx))
        return out

    def _phase_repair(self, st: RunState):
        origin = self._model("origin.ckpt")
        model = self._model("unlearned.ckpt")
        parts = load_partitions(self.path("partitions.json"))
        rc = self.cfg.repair
        gate = RepairGate(rc.policy(self.seed))
        before = self._client_retain_acc(origin, parts)
        after = self._client_retain_acc(model, parts)
        gate.evaluate({c: a for c, a in before.items() if a > 0}, after)
        gate.log_to(self.metrics)
        ran = False
        if rc.enabled and gate.triggered:
            gate.claim()
            nr = aggregate_retain_proxies([load_bundle(self.path("noise_retain"))])
            run_repair(model, nr, gate.policy, self.metrics)
            ran = not nr.empty
        save_checkpoint(model, self.path("final.ckpt"), model_header(model, seed=self.seed, repaired=ran))
        self.path("repair.json").write_text(json.dumps({
            "triggered": gate.triggered, "ran": ran, "delta": rc.delta,
            "decisions": [asdict(d) for d in gate.decisions]}, indent=1))

    def _phase_baselines(self, st: RunState):
        train, _, man = self.data
        forget = self.cfg.forget_classes()
        fmask = train.class_mask(forget)
        d_f = train.subset(fmask.nonzero().flatten())
        d_r = train.subset((~fmask).nonzero().flatten())
        fed = self.cfg.fed_config(self.seed)
        for name in self.cfg.baselines:
            if name == "retrain":
                continue
            bcfg = self.cfg.baseline_config(name, self.seed)
            model = self._model("origin.ckpt")
            if name == "neg_gradient":
                bl.neg_gradient_finetune(model, d_f, bcfg)
            elif name == "random_label":
                bl.random_label_finetune(model, d_f, bcfg, man.num_classes)
            elif name == "retain_finetune":
                bl.retain_finetune(model, d_r, bcfg, fed)
            save_checkpoint(model, self.path(f"baseline_{name}.ckpt"), model_header(model, method=name))

    def _phase_audit(self, st: RunState):
        train, test, _ = self.data
        oracle = self._model("retrained.ckpt")
        origin = self._model("origin.ckpt")
        out = self.path("audit")
        out.mkdir(exist_ok=True)
        repaired = json.loads(self.path("repair.json").read_text())["ran"]
        methods = {"origin": "origin.ckpt", "ours": "final.ckpt"}
        if repaired:
            methods["ours_unrepaired"] = "unlearned.ckpt"
        methods["retrain"] = "retrained.ckpt"
        for name in self.cfg.baselines:
            if name != "retrain":
                methods[name] = f"baseline_{name}.ckpt"
        ac = self.cfg.audit
        for method, ckpt in methods.items():
            rep = audit(self._model(ckpt), method, train, test, self.cfg.forget_classes(), oracle=oracle,
                        origin=origin, mia_repeats=ac.mia_repeats, seed=self.seed,
                        ttest_statistic=ac.ttest_statistic)
            rep.extra = {"seed": self.seed, "config_hash": st.config_hash, "variant": self.cfg.name,
                         "uses_real_data": method in bl.USES_REAL_DATA or
                         (method.startswith("ours") and self.cfg.ablation.real_data),
                         "checkpoint": str(self.path(ckpt))}
            rep.save(out / f"{method}.json")

    # -- driver ---------------------------------------------------------------------

    def execute(self, stop_after: str | None = None) -> RunResult:
        st = self._open_state()
        self.metrics = metrics_log(self.dir)
        reuse_ok = True
        for phase in PHASES:
            if st.completed.get(phase) == self.keys[phase]:
                continue
            if phase in st.completed:
                raise StateMismatch(f"phase {phase} was completed with different inputs")
            reuse_ok = reuse_ok and phase in self.ARTIFACTS and self._reusable(phase)
            t0 = time.perf_counter()
            try:
                if reuse_ok:
                    for name in self.ARTIFACTS[phase]:
                        # an empty retain bundle has no tensor file
                        if (self.reuse_dir / name).exists():
                            shutil.copy2(self.reuse_dir / name, self.path(name))
                    log.info("seed %d: reused %s from %s", self.seed, phase, self.reuse_dir)
                else:
                    log.info("seed %d: running %s", self.seed, phase)
                    getattr(self, f"_phase_{phase}")(st)
            except (StateMismatch, KeyboardInterrupt):
                raise
            except Exception as exc:
                raise PipelineError(phase, f"{type(exc).__name__}: {exc}") from exc
            st.completed[phase] = self.keys[phase]
            st.timings[phase] = time.perf_counter() - t0
            st.save(self.state_path)
            if phase == stop_after:
                break
        reports = {}
        if (self.dir / "audit").exists():
            for p in sorted((self.dir / "audit").glob("*.json")):
                reports[p.stem] = AuditReport.load(p)
        return RunResult(self.dir, reports, st)


def run_experiment(cfg: ExperimentConfig, reuse_from: str | Path | None = None, data_root: str | None = None,
                   seeds: Sequence[int] | None = None) -> list[RunResult]:
    results = []
    for seed in seeds if seeds is not None else cfg.seeds:
        results.append(Run(cfg, seed, reuse_from, data_root).execute())
    return results


def audit_against(run_dir: str | Path, oracle_dir: str | Path, data_root: str | None = None) -> dict[str, AuditReport]:
    """Re-audit every checkpoint of ``run_dir`` against another run's retrained oracle."""
    run_dir, oracle_dir = Path(run_dir), Path(oracle_dir)
    cfg_d = json.loads((run_dir / "config.json").read_text())
    from .config import from_dict
    cfg = from_dict(cfg_d)
    seed = RunState.load(run_dir / "state.json").seed
    train, test, _ = load_dataset(cfg.dataset, data_root)
    oracle = model_from_checkpoint(oracle_dir / "retrained.ckpt")[0]
    origin = model_from_checkpoint(run_dir / "origin.ckpt")[0]
    out = run_dir / "audit_vs" / oracle_dir.name
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    methods = {"origin": "origin.ckpt", "ours_unrepaired": "unlearned.ckpt", "ours": "final.ckpt"}
    methods.update({n: f"baseline_{n}.ckpt" for n in cfg.baselines if n != "retrain"})
    for method, ckpt in methods.items():
        p = run_dir / ckpt
        if not p.exists():
            continue
        rep = audit(model_from_checkpoint(p)[0], method, train, test, cfg.forget_classes(), oracle=oracle,
                    origin=origin, mia_repeats=cfg.audit.mia_repeats, seed=seed,
                    ttest_statistic=cfg.audit.ttest_statistic)
        rep.extra = {"seed": seed, "oracle": str(oracle_dir), "checkpoint": str(p)}
        rep.save(out / f"{method}.json")
        reports[method] = rep
    return reports
