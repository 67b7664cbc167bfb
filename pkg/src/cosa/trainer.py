"""Training configuration, the alternating prediction / actor-critic loop,
run artifacts, checkpoints and the ablation matrix."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import __version__
from .agents import ReplayMemory, ReplayRecord, loss_actor, loss_critic, reward
from .data import MODALITIES, Dataset, MultimodalBatch, parse_modalities, subset_modalities
from .diffcore import (NonFiniteError, derive_seed, load_checkpoint, load_state_into,
                       save_checkpoint)
from .dpsr import loss_dpsr
from .fusion import apply_actions, loss_prediction
from .metrics import metrics_mer, metrics_msa
from .model import CoSANetwork

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = {"msa": (10.0, 0.5, 1.0, 1.0), "mer": (9.0, 1.0, 30.0, 1.0)}
LOSS_KEYS = ("total", "L_p", "L_m", "L_r", "L_c", "L_msd", "L_dpsr", "L_critic", "L_actor")


class TrainingDiverged(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "msa"
    fusion: str = "add"
    alphas: list | None = None
    gamma: float = 0.5
    zeta: float = 0.01
    lr: float = 1e-3
    actor_lr: float | None = 1e-5
    lr_decay: float = 0.95
    patience: int = 50
    epochs: int = 500
    batch_size: int = 64
    seed: int = 0
    enable_msd: bool = True
    enable_dpsr: bool = True
    enable_sac: bool = True
    use_eta: bool = True
    use_lm: bool = True
    use_lr: bool = True
    use_lc: bool = True
    contrast_margin: float | None = 10.0
    w_norm: str = "trace"
    replay_capacity: int = 64
    alternation: str = "batch"
    actor_warmup: int = 0
    exploration: float = 0.05
    modalities: str = "VAT"
    embed_dim: int = 128
    hidden_dim: int = 128
    head_hidden: int = 64
    actor_hidden: int = 128
    critic_dim: int = 64
    critic_ff: int = 128
    num_classes: int | None = None
    keep_state: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def resolved_alphas(self) -> tuple[float, float, float, float]:
        return tuple(self.alphas) if self.alphas is not None else DEFAULT_ALPHAS[self.task]

    # a module whose loss weight is zero is the same as a disabled module
    @property
    def msd_on(self) -> bool:
        return self.enable_msd and self.resolved_alphas[1] > 0

    @property
    def dpsr_on(self) -> bool:
        return self.enable_dpsr and self.resolved_alphas[2] > 0

    @property
    def sac_on(self) -> bool:
        return self.enable_sac and self.resolved_alphas[3] > 0

    @property
    def active(self) -> tuple[str, ...]:
        return parse_modalities(self.modalities)

    def validate(self) -> None:
        try:
            jsonschema.validate(self.to_dict(), CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(map(str, exc.absolute_path)) or "config"
            raise ConfigError(f"{where}: {exc.message}") from None
        if any(a < 0 for a in self.resolved_alphas):
            raise ConfigError("alphas must be non-negative")
        parse_modalities(self.modalities)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)


_num = {"type": "number"}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"enum": ["msa", "mer"]},
        "fusion": {"enum": ["add", "concat"]},
        "alphas": {"oneOf": [{"type": "null"},
                             {"type": "array", "items": {"type": "number", "minimum": 0},
                              "minItems": 4, "maxItems": 4}]},
        "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "zeta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "actor_lr": {"oneOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0}]},
        "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "patience": {"type": "integer", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        **{k: {"type": "boolean"} for k in (
            "enable_msd", "enable_dpsr", "enable_sac", "use_eta", "use_lm", "use_lr", "use_lc",
            "keep_state")},
        "w_norm": {"enum": ["none", "softmax", "trace"]},
        "contrast_margin": {"oneOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0}]},
        "replay_capacity": {"type": "integer", "minimum": 1},
        "actor_warmup": {"type": "integer", "minimum": 0},
        "exploration": {"type": "number", "minimum": 0},
        "alternation": {"enum": ["batch", "epoch"]},
        "modalities": {"type": "string", "pattern": "^[VATvat+]+$"},
        **{k: {"type": "integer", "minimum": 1} for k in (
            "embed_dim", "hidden_dim", "head_hidden", "actor_hidden", "critic_dim", "critic_ff")},
        "num_classes": {"oneOf": [{"type": "null"}, {"type": "integer", "minimum": 2}]},
    },
}


def _to_torch(batch: MultimodalBatch, task: str):
    x = {m: torch.from_numpy(np.ascontiguousarray(batch.features[m], dtype=np.float32)) for m in MODALITIES}
    if task == "msa":
        y = torch.from_numpy(np.asarray(batch.labels, dtype=np.float32))
    else:
        y = torch.from_numpy(np.asarray(batch.labels, dtype=np.int64))
    return x, y


def _check(value: torch.Tensor, name: str, epoch: int, step: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"{name} became non-finite at epoch {epoch}, step {step}")


@dataclass
class RunArtifacts:
    run_dir: Path | None
    config_hash: str
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_valid: float = float("inf")


class Trainer:
    """Owns one run: network, optimizers, schedulers, replay memory and logs."""

    def __init__(self, config: TrainConfig, dataset: Dataset, run_dir=None, extra_inputs: dict | None = None):
        self.config = config
        self.extra_inputs = dict(extra_inputs or {})
        self.dataset = dataset
        if dataset.task != config.task:
            raise ConfigError(f"config task {config.task!r} but dataset task {dataset.task!r}")
        if "train" not in dataset.splits:
            raise ConfigError("dataset has no 'train' split")
        self.num_classes = config.num_classes or dataset.num_classes
        if config.task == "mer" and not self.num_classes:
            raise ConfigError("MER training needs num_classes")
        out_dim = self.num_classes if config.task == "mer" else 1
        self.splits = {k: subset_modalities(v, config.active) for k, v in dataset.splits.items()}
        c = config
        self.net = CoSANetwork(
            dataset.widths, out_dim, fusion=c.fusion, embed_dim=c.embed_dim, hidden_dim=c.hidden_dim,
            head_hidden=c.head_hidden, actor_hidden=c.actor_hidden, critic_dim=c.critic_dim,
            critic_ff=c.critic_ff, use_msd=c.msd_on, use_dpsr=c.dpsr_on, use_sac=c.sac_on,
            w_norm=c.w_norm, active=c.active, seed=c.seed,
        )
        self.opt_pred = torch.optim.Adam(self.net.prediction_parameters(), lr=c.lr)
        self.opt_critic = torch.optim.Adam(self.net.ac.critic.parameters(), lr=c.lr)
        self.opt_actor = torch.optim.Adam(self.net.ac.agents.parameters(), lr=c.actor_lr or c.lr)
        self.optimizers = {"pred": self.opt_pred, "critic": self.opt_critic, "actor": self.opt_actor}
        self.schedulers = {
            k: torch.optim.lr_scheduler.ReduceLROnPlateau(o, mode="min", factor=c.lr_decay, patience=c.patience)
            for k, o in self.optimizers.items()
        }
        self.memory = ReplayMemory(c.replay_capacity, seed=derive_seed(c.seed, "replay"))
        self.pending: tuple | None = None
        self.epoch = 0
        self.step = 0
        self.best_state: dict | None = None
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.artifacts = RunArtifacts(self.run_dir, c.digest())
        if self.run_dir is not None:
            self._write_inputs()

    # ------------------------------------------------------------------ setup

    def _write_inputs(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        inputs = {
            "config_hash": self.config.digest(),
            "dataset_hash": self.dataset.digest(),
            "code_version": __version__,
            **self.extra_inputs,
        }
        (self.run_dir / "inputs.json").write_text(json.dumps(inputs, indent=2, sort_keys=True) + "\n")
        (self.run_dir / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        (self.run_dir / "exports").mkdir(exist_ok=True)

    @property
    def lr(self) -> float:
        return self.opt_pred.param_groups[0]["lr"]

    # ------------------------------------------------------------------ losses

    def prediction_losses(self, x, y, rep=None, w=None) -> tuple[dict, torch.Tensor, dict, dict]:
        """Phase-A objective alpha1 L_p + alpha2 L_msd + alpha3 L_dpsr and its parts."""
        c = self.config
        a1, a2, a3, _ = c.resolved_alphas
        net = self.net
        rep = rep if rep is not None else net.represent(x)
        w = w if w is not None else net.weights(rep.f)
        pred = net.predict_from(rep.f, w)
        zero = pred.new_zeros(())
        parts = {"L_p": loss_prediction(pred, y, c.task)}
        if net.use_msd:
            msd = net.msd.losses(x, rep.pairs, c.contrast_margin, c.use_lm, c.use_lr, c.use_lc)
            parts.update(L_m=msd.modality, L_r=msd.reconstruct, L_c=msd.contrast, L_msd=msd.total)
        else:
            parts.update(L_m=zero, L_r=zero, L_c=zero, L_msd=zero)
        if net.use_dpsr:
            parts["L_dpsr"] = torch.stack([loss_dpsr(rep.f[m], c.use_eta) for m in net.active]).mean()
        else:
            parts["L_dpsr"] = zero
        total = a1 * parts["L_p"] + a2 * parts["L_msd"] + a3 * parts["L_dpsr"]
        parts["total"] = total
        return parts, pred, rep, w

    # ------------------------------------------------------------------ phases

    def _phase_a(self, batch: MultimodalBatch):
        x, y = _to_torch(batch, self.config.task)
        rep = self.net.represent(x)
        w = self._explore(self.net.weights(rep.f))
        parts, _, rep, w = self.prediction_losses(x, y, rep, w)
        _check(parts["total"], "prediction objective", self.epoch, self.step)
        self.opt_pred.zero_grad()
        parts["total"].backward()
        for p in self.net.prediction_parameters():
            if p.grad is not None:
                _check(p.grad, "prediction gradient", self.epoch, self.step)
        self.opt_pred.step()
        f = {m: v.detach() for m, v in rep.f.items()}
        w = {m: v.detach() for m, v in w.items()}
        stats = {k: float(v.detach()) for k, v in parts.items()}
        stats.update({f"w_{m}": float(w[m].mean()) for m in self.net.active})
        return f, w, y, stats

    def _explore(self, w: dict) -> dict:
        """Gaussian action noise, clipped to [0, 1]; keyed on the step so resumes replay it."""
        sigma = self.config.exploration
        if not self.net.use_sac or sigma == 0:
            return w
        rng = np.random.default_rng([derive_seed(self.config.seed, "explore"), self.step])
        out = {}
        for m in MODALITIES:
            if m in self.net.active:
                noise = torch.from_numpy(rng.standard_normal((w[m].shape[0], 1)).astype(np.float32))
                out[m] = (w[m] + sigma * noise).clamp(0.0, 1.0)
            else:
                out[m] = w[m]
        return out

    def _phase_b(self, f, w, y) -> dict:
        c = self.config
        ac = self.net.ac
        alpha4 = c.resolved_alphas[3]
        with torch.no_grad():
            r = reward(self.net.predict_from(f, w), y, c.task)
        if self.pending is not None:
            pf, pw, pr = self.pending
            n = min(len(pr), len(r))
            self.memory.push(ReplayRecord(
                states={m: pf[m][:n] for m in MODALITIES},
                actions={m: pw[m][:n] for m in MODALITIES},
                next_states={m: apply_actions(f[m][:n], pw[m][:n]) for m in MODALITIES},
                reward=pr[:n],
                active=self.net.active,
            ))
        self.pending = (f, w, r)
        out = {"L_critic": 0.0, "L_actor": 0.0, "reward": float(r.mean())}
        if len(self.memory) == 0:
            return out
        record = self.memory.sample(1)[0]
        lc = loss_critic(record, ac, c.gamma)
        _check(lc, "L_critic", self.epoch, self.step)
        self.opt_critic.zero_grad()
        (alpha4 * lc).backward()
        self.opt_critic.step()
        if self.epoch < c.actor_warmup:
            ac.soft_update(c.zeta)
            out.update(L_critic=lc.item())
            return out
        la = loss_actor(record.states, ac, self.net.active)
        _check(la, "L_actor", self.epoch, self.step)
        self.opt_actor.zero_grad()
        (alpha4 * la).backward()
        self.opt_actor.step()
        ac.soft_update(c.zeta)
        out.update(L_critic=lc.item(), L_actor=la.item())
        return out

    def train_epoch(self) -> dict:
        c = self.config
        self.net.train()
        sums: dict[str, float] = {}
        count = 0
        deferred = []

        def add(d, n):
            for k, v in d.items():
                sums[k] = sums.get(k, 0.0) + v * n

        for batch in self.splits["train"].batches(c.batch_size, shuffle_seed=c.seed, epoch=self.epoch):
            n = len(batch)
            f, w, y, parts = self._phase_a(batch)
            add(parts, n)
            if self.net.use_sac:
                if c.alternation == "batch":
                    add(self._phase_b(f, w, y), n)
                else:
                    deferred.append((f, w, y))
            count += n
            self.step += 1
        for f, w, y in deferred:
            add(self._phase_b(f, w, y), len(y))
        out = {k: v / count for k, v in sums.items()}
        for k in ("L_critic", "L_actor"):
            out.setdefault(k, 0.0)
        return out

    # ------------------------------------------------------------------ evaluation

    @torch.no_grad()
    def forward_split(self, split: str, batch_size: int | None = None) -> dict:
        """Predictions, weights and representations for a whole split (fixed order)."""
        self.net.eval()
        data = self.splits[split]
        preds, ws, fs, losses, count = [], [], [], {}, 0
        for batch in data.batches(batch_size or self.config.batch_size):
            x, y = _to_torch(batch, self.config.task)
            parts, pred, rep, w = self.prediction_losses(x, y)
            n = len(batch)
            for k, v in parts.items():
                losses[k] = losses.get(k, 0.0) + float(v) * n
            count += n
            preds.append(pred.numpy())
            ws.append({m: w[m].numpy() for m in MODALITIES})
            fs.append({m: rep.f[m].numpy() for m in MODALITIES})
        return {
            "pred": np.concatenate(preds),
            "labels": data.labels,
            "ids": data.ids,
            "weights": {m: np.concatenate([w[m] for w in ws]) for m in MODALITIES},
            "f": {m: np.concatenate([f[m] for f in fs]) for m in MODALITIES},
            "losses": {k: v / count for k, v in losses.items()},
        }

    def metrics(self, pred, labels):
        if self.config.task == "msa":
            return metrics_msa(pred, labels)
        return metrics_mer(pred, labels, self.num_classes)

    def evaluate(self, split: str) -> dict:
        out = self.forward_split(split)
        return {**out["losses"], **self.metrics(out["pred"], out["labels"]).values}

    # ------------------------------------------------------------------ loop

    def fit(self, epochs: int | None = None) -> RunArtifacts:
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        has_valid = "valid" in self.splits
        for _ in range(epochs):
            train_parts = self.train_epoch()
            record = {"epoch": self.epoch, "lr": self.lr, "train": train_parts}
            monitor = train_parts["L_p"]
            if has_valid:
                record["valid"] = self.evaluate("valid")
                monitor = record["valid"]["L_p"]
            for sched in self.schedulers.values():
                sched.step(monitor)
            if monitor < self.artifacts.best_valid:
                self.artifacts.best_valid = monitor
                self.artifacts.best_epoch = self.epoch
                self.best_state = copy.deepcopy(self.net.state_dict())
                if self.run_dir is not None:
                    self.save_params(self.run_dir / "best.csa1")
            record["config_hash"] = self.artifacts.config_hash
            self._log(record)
            log.info("epoch %d  train L_p %.4f  monitor %.4f", self.epoch, train_parts["L_p"], monitor)
            self.epoch += 1
        if self.run_dir is not None:
            self.save_params(self.run_dir / "last.csa1")
            if c.keep_state:
                self.save_state(self.run_dir / "state.csa1")
        return self.artifacts

    def _log(self, record: dict) -> None:
        self.artifacts.history.append(record)
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def restore_best(self) -> None:
        if self.best_state is not None:
            self.net.load_state_dict(self.best_state)

    # ------------------------------------------------------------------ checkpoints

    def save_params(self, path) -> None:
        save_checkpoint(path, {f"net.{k}": v for k, v in self.net.state_dict().items()},
                        meta={"epoch": self.epoch, "config_hash": self.artifacts.config_hash})

    def load_params(self, path) -> dict:
        arrays, meta = load_checkpoint(path)
        load_state_into(self.net, arrays, prefix="net.")
        return meta

    def save_state(self, path) -> None:
        """Everything needed to resume bit-exactly: parameters, optimizer moments,
        scheduler state, replay contents, pending transition and RNG state."""
        tensors = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        opt_meta = {}
        for name, opt in self.optimizers.items():
            sd = opt.state_dict()
            steps = {}
            for idx, st in sd["state"].items():
                steps[str(idx)] = float(st["step"])
                tensors[f"optim.{name}.{idx}.exp_avg"] = st["exp_avg"]
                tensors[f"optim.{name}.{idx}.exp_avg_sq"] = st["exp_avg_sq"]
            opt_meta[name] = {"steps": steps, "param_groups": sd["param_groups"]}
        for i, rec in enumerate(self.memory._records):
            for m in MODALITIES:
                tensors[f"replay.{i}.states.{m}"] = rec.states[m]
                tensors[f"replay.{i}.actions.{m}"] = rec.actions[m]
                tensors[f"replay.{i}.next_states.{m}"] = rec.next_states[m]
            tensors[f"replay.{i}.reward"] = rec.reward
        if self.pending is not None:
            pf, pw, pr = self.pending
            for m in MODALITIES:
                tensors[f"pending.f.{m}"] = pf[m]
                tensors[f"pending.w.{m}"] = pw[m]
            tensors["pending.r"] = pr
        meta = {
            "epoch": self.epoch,
            "step": self.step,
            "config_hash": self.artifacts.config_hash,
            "optimizers": opt_meta,
            "schedulers": {k: _jsonable(s.state_dict()) for k, s in self.schedulers.items()},
            "replay_len": len(self.memory),
            "replay_rng": self.memory._rng.bit_generator.state,
            "has_pending": self.pending is not None,
            "history": self.artifacts.history,
            "best_valid": self.artifacts.best_valid,
            "best_epoch": self.artifacts.best_epoch,
        }
        save_checkpoint(path, tensors, meta)

    def load_state(self, path) -> None:
        arrays, meta = load_checkpoint(path)
        if meta.get("config_hash") != self.artifacts.config_hash:
            raise ConfigError("checkpoint was written with a different config")
        net_arrays = {k: v for k, v in arrays.items() if k.startswith("net.")}
        load_state_into(self.net, net_arrays, prefix="net.")
        t = lambda k: torch.from_numpy(arrays[k].copy())
        for name, opt in self.optimizers.items():
            om = meta["optimizers"][name]
            state = {
                int(idx): {"step": torch.tensor(step), "exp_avg": t(f"optim.{name}.{idx}.exp_avg"),
                           "exp_avg_sq": t(f"optim.{name}.{idx}.exp_avg_sq")}
                for idx, step in om["steps"].items()
            }
            opt.load_state_dict({"state": state, "param_groups": om["param_groups"]})
        for k, s in self.schedulers.items():
            s.load_state_dict(meta["schedulers"][k])
        self.memory = ReplayMemory(self.config.replay_capacity)
        self.memory._rng.bit_generator.state = meta["replay_rng"]
        for i in range(meta["replay_len"]):
            self.memory.push(ReplayRecord(
                states={m: t(f"replay.{i}.states.{m}") for m in MODALITIES},
                actions={m: t(f"replay.{i}.actions.{m}") for m in MODALITIES},
                next_states={m: t(f"replay.{i}.next_states.{m}") for m in MODALITIES},
                reward=t(f"replay.{i}.reward"),
                active=self.net.active,
            ))
        self.pending = None
        if meta["has_pending"]:
            self.pending = ({m: t(f"pending.f.{m}") for m in MODALITIES},
                            {m: t(f"pending.w.{m}") for m in MODALITIES}, t("pending.r"))
        self.epoch, self.step = meta["epoch"], meta["step"]
        self.artifacts.history = list(meta["history"])
        self.artifacts.best_valid = meta["best_valid"]
        self.artifacts.best_epoch = meta["best_epoch"]
        self.best_state = copy.deepcopy(self.net.state_dict())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def train(config: TrainConfig, dataset: Dataset, run_dir=None) -> Trainer:
    trainer = Trainer(config, dataset, run_dir)
    trainer.fit()
    return trainer


# ---------------------------------------------------------------------------
# ablation matrix

ABLATION_ROWS = {
    "baseline": {"enable_msd": False, "enable_dpsr": False, "enable_sac": False},
    "only MSD": {"enable_msd": True, "enable_dpsr": False, "enable_sac": False},
    "MSD w/o L_r": {"enable_msd": True, "enable_dpsr": False, "enable_sac": False, "use_lr": False},
    "MSD w/o L_m": {"enable_msd": True, "enable_dpsr": False, "enable_sac": False, "use_lm": False},
    "MSD w/o L_c": {"enable_msd": True, "enable_dpsr": False, "enable_sac": False, "use_lc": False},
    "only DPSR": {"enable_msd": False, "enable_dpsr": True, "enable_sac": False},
    "DPSR w/o eta": {"enable_msd": False, "enable_dpsr": True, "enable_sac": False, "use_eta": False},
    "only SAC": {"enable_msd": False, "enable_dpsr": False, "enable_sac": True},
    "full": {"enable_msd": True, "enable_dpsr": True, "enable_sac": True},
}


def run_row(config: TrainConfig, dataset: Dataset, overrides: dict, seed: int, run_dir=None,
            split: str = "test") -> dict:
    cfg = replace(config, **overrides, seed=seed)
    trainer = Trainer(cfg, dataset, run_dir)
    trainer.fit()
    trainer.restore_best()
    out = trainer.forward_split(split)
    return trainer.metrics(out["pred"], out["labels"]).values


def ablate(config: TrainConfig, dataset: Dataset, matrix: dict | list | None = None,
           seeds=(1, 2, 3), out_dir=None, workers: int = 1, split: str = "test") -> dict:
    """One train + eval per (row, seed); returns ``{row: {"seeds": [...], "mean": {...}}}``.

    ``matrix`` maps row names to config overrides; a list selects rows of the
    standard matrix by name.
    """
    if matrix is None:
        matrix = ABLATION_ROWS
    elif isinstance(matrix, (list, tuple)):
        unknown = [r for r in matrix if r not in ABLATION_ROWS]
        if unknown:
            raise ConfigError(f"unknown ablation rows {unknown}; known: {list(ABLATION_ROWS)}")
        matrix = {r: ABLATION_ROWS[r] for r in matrix}
    jobs = [(row, seed) for row in matrix for seed in seeds]

    def run_dir_for(row, seed):
        if out_dir is None:
            return None
        return Path(out_dir) / row.replace(" ", "_").replace("/", "") / f"seed{seed}"

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_row, config, dataset, matrix[r], s, run_dir_for(r, s), split)
                       for r, s in jobs]
            results = [f.result() for f in futures]
    else:
        results = [run_row(config, dataset, matrix[r], s, run_dir_for(r, s), split) for r, s in jobs]

    table: dict = {}
    for (row, seed), values in zip(jobs, results):
        table.setdefault(row, {"seeds": {}, "mean": {}})["seeds"][seed] = values
    for row, entry in table.items():
        keys = next(iter(entry["seeds"].values())).keys()
        entry["mean"] = {k: float(np.mean([v[k] for v in entry["seeds"].values()])) for k in keys}
    return table


def format_ablation(table: dict, task: str = "msa") -> str:
    if task == "msa":
        cols = ("acc7", "acc2", "f1", "mae", "corr")
    else:
        cols = ("acc_avg", "f1_avg", "accuracy")
    lines = [f"{'Settings':<16s}" + "".join(f"{c.upper():>10s}" for c in cols)]
    for row, entry in table.items():
        vals = entry["mean"]
        lines.append(f"{row:<16s}" + "".join(
            f"{100 * vals[c]:10.2f}" if c not in ("mae", "corr") else f"{vals[c]:10.4f}" for c in cols))
    return "\n".join(lines)
