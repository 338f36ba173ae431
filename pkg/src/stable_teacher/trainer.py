"""Training loop: student/teacher detectors plus student/teacher error recovery.

Per step:

1. teacher detector on weak views (no grad) -> t_cls, t_loc
2. teacher EoR on t_loc (no grad) -> t_loc_eor
3. student detector on strong views -> s_cls, s_loc
4. student EoR on detached s_loc of labeled clips -> s_loc_eor
5. supervised losses on labeled clips, consistency losses on all clips
6. one Adam step over student and student-EoR parameters
7. EMA of both teachers

Labeled and unlabeled clips go through the student in separate forward calls
and use separate random streams, so with a zero unsupervised weight the
student follows exactly the supervised-only trajectory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import losses as L
from .augment import AugmentConfig, ViewPair, make_view_pair
from .detector import Detector, DetectorConfig, clips_to_tensor, init_detector, make_teacher
from .eor import EoRConfig, ErrorRecovery, init_eor
from .metrics import EvalReport, evaluate_outputs
from .synthdata import (SplitManifest, SynthConfig, class_table, generate_samples, load_manifest,
                        load_samples, split_labeled_unlabeled)
from .types import LocalizationMap, ModelOutput, Sample, VideoClip

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stable-teacher-checkpoint/1"

# mode -> (use unlabeled consistency, use EoR, use DoP)
MODES = {
    "supervised": (False, False, False),
    "mean-teacher": (True, False, False),
    "+eor": (True, True, False),
    "+dop": (True, False, True),
    "full": (True, True, True),
}


class CheckpointError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, breakdown: Optional[dict] = None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    mode: str = "full"
    epochs: int = 50
    batch_size: int = 8
    beta: float = 0.99
    lambda_max: float = 0.1
    ramp_epochs: int = 15
    ramp_kind: str = "linear"
    lr: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    clip_len: int = 8
    detector_channels: Sequence[int] = field(default_factory=lambda: [16, 32, 64])
    eor_depth: int = 4
    eor_channels: Sequence[int] = field(default_factory=lambda: [16, 32, 64, 128])
    eor_volumetric: bool = True
    burn_in_epochs: int = 0
    eval_model: str = "teacher"
    eval_every: int = 1
    iou_mode: str = "box"
    binarize_thresh: float = 0.5
    aug_crop: bool = False
    dataset_dir: Optional[str] = None
    split_path: Optional[str] = None
    percent_labeled: float = 10.0
    split_seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    out_dir: Optional[str] = None
    checkpoint_every: int = 1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even (half labeled, half unlabeled)")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.eval_model not in ("teacher", "student"):
            raise ValueError("eval_model must be 'teacher' or 'student'")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")

    @property
    def use_unlabeled(self) -> bool:
        return MODES[self.mode][0]

    @property
    def use_eor(self) -> bool:
        return MODES[self.mode][1]

    @property
    def use_dop(self) -> bool:
        return MODES[self.mode][2]

    def detector_config(self, num_classes: int, height: int, width: int, channels: int) -> DetectorConfig:
        return DetectorConfig(num_classes=num_classes, clip_len=self.clip_len, height=height,
                              width=width, channels=list(self.detector_channels),
                              in_channels=channels, seed=self.seed)

    def eor_config(self) -> EoRConfig:
        return EoRConfig(depth=self.eor_depth, channels=list(self.eor_channels),
                         seed=self.seed + 1, volumetric=self.eor_volumetric)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_dict()
        d["detector_channels"] = list(self.detector_channels)
        d["eor_channels"] = list(self.eor_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("synth"), dict):
            d["synth"] = SynthConfig.from_dict(d["synth"])
        return cls(**d)

    def config_hash(self) -> str:
        """Hash of every setting that shapes the trajectory (not run length or output paths)."""
        d = self.to_dict()
        for k in ("epochs", "out_dir", "eval_every", "checkpoint_every", "eval_model",
                  "iou_mode", "binarize_thresh"):
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# data streams ------------------------------------------------------------

class SampleStream:
    """Endless reshuffled cycle over sample ids producing augmented view pairs."""

    def __init__(self, ids: Sequence[str], seed: int, clip_len: int, aug: AugmentConfig):
        self.ids = list(ids)
        self.rng = np.random.default_rng(seed)
        self.clip_len = clip_len
        self.aug = aug
        self.order: list[int] = []
        self.pos = 0

    def _next_index(self) -> int:
        if self.pos >= len(self.order):
            self.order = [int(i) for i in self.rng.permutation(len(self.ids))]
            self.pos = 0
        i = self.order[self.pos]
        self.pos += 1
        return i

    def next_batch(self, n: int, samples: dict[str, Sample]) -> list[ViewPair]:
        if not self.ids:
            return []
        out = []
        for _ in range(n):
            s = samples[self.ids[self._next_index()]]
            out.append(make_view_pair(s, self.clip_len, self.rng, self.aug))
        return out

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": self.order, "pos": self.pos}

    def set_state(self, st: dict) -> None:
        self.rng.bit_generator.state = st["rng"]
        self.order = list(st["order"])
        self.pos = int(st["pos"])


# state ---------------------------------------------------------------------

@dataclass
class TrainState:
    student: Detector
    teacher: Detector
    eor_student: Optional[ErrorRecovery]
    eor_teacher: Optional[ErrorRecovery]
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    streams: dict = field(default_factory=dict)  # name -> SampleStream state dict

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def trainable(self) -> list[nn.Parameter]:
        params = list(self.student.parameters())
        if self.eor_student is not None:
            params += list(self.eor_student.parameters())
        return params


def init_state(config: TrainConfig, num_classes: int, height: int, width: int,
               channels: int) -> TrainState:
    config.validate()
    student = init_detector(config.detector_config(num_classes, height, width, channels))
    teacher = make_teacher(student)
    eor_student = eor_teacher = None
    if config.use_eor:
        eor_student = init_eor(config.eor_config())
        eor_teacher = make_teacher(eor_student)
    params = list(student.parameters()) + (list(eor_student.parameters()) if eor_student else [])
    optimizer = torch.optim.Adam(params, lr=config.lr)
    return TrainState(student, teacher, eor_student, eor_teacher, optimizer, config)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, beta: float) -> nn.Module:
    """In place: every teacher parameter becomes ``beta * teacher + (1 - beta) * student``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, pt in t_params.items():
        ps = s_params[name]
        if pt.shape != ps.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(pt.shape)} vs {tuple(ps.shape)}")
        pt.mul_(beta).add_(ps, alpha=1.0 - beta)
    return teacher


def _masks_tensor(pairs: Sequence[ViewPair], height: int, width: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([
        np.stack([a.to_mask(height, width) for a in p.annotations_t]) for p in pairs
    ]).astype(np.float32))


def train_step(state: TrainState, labeled: Sequence[ViewPair], unlabeled: Sequence[ViewPair],
               lambda_t: float) -> L.LossBreakdown:
    """One optimization step; mutates ``state`` and returns the loss breakdown."""
    cfg = state.config
    if not labeled:
        raise ValueError("train_step needs at least one labeled clip")
    state.student.train()
    consistency = cfg.use_unlabeled
    all_pairs = list(labeled) + (list(unlabeled) if consistency else [])

    if consistency:
        with torch.no_grad():
            t_cls, t_loc = state.teacher(clips_to_tensor([p.weak for p in all_pairs]))
            t_loc_eor = state.eor_teacher(t_loc) if cfg.use_eor else None

    s_cls_l, s_loc_l = state.student(clips_to_tensor([p.strong for p in labeled]))
    if consistency and unlabeled:
        s_cls_u, s_loc_u = state.student(clips_to_tensor([p.strong for p in unlabeled]))
        s_cls = torch.cat([s_cls_l, s_cls_u])
        s_loc = torch.cat([s_loc_l, s_loc_u])
    else:
        s_cls, s_loc = s_cls_l, s_loc_l

    s_loc_eor = None
    if cfg.use_eor:
        state.eor_student.train()
        s_loc_eor = state.eor_student(s_loc_l.detach())

    h, w = s_loc_l.shape[-2:]
    labels = torch.tensor([p.label for p in labeled], dtype=torch.long)
    sup_cls, sup_loc, sup_eor = L.supervised_loss(s_cls_l, s_loc_l, s_loc_eor, labels,
                                                  _masks_tensor(labeled, h, w))
    comps = {"sup_cls": sup_cls, "sup_loc": sup_loc, "sup_eor": sup_eor}
    if consistency:
        comps["base_cls_cons"] = L.cls_consistency(t_cls, s_cls)
        comps["base_loc_cons"] = L.loc_consistency(t_loc, s_loc)
        if cfg.use_eor:
            comps["eor_cons"] = L.eor_consistency(t_loc_eor, s_loc)
        if cfg.use_dop:
            comps["dop_u"], comps["dop_eor"] = L.dop_loss(t_loc, t_loc_eor, s_loc)

    try:
        total, breakdown = L.total_loss(comps, lambda_t)
    except L.NonFiniteLossError as err:
        raise TrainingAborted(str(err), err.breakdown) from err

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update(state.teacher, state.student, cfg.beta)
    if cfg.use_eor:
        ema_update(state.eor_teacher, state.eor_student, cfg.beta)
    state.step += 1
    return breakdown


# data ----------------------------------------------------------------------

@dataclass
class TrainData:
    samples: dict[str, Sample]
    split: SplitManifest
    class_names: list[str]
    class_background: dict[int, str]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        s = next(iter(self.samples.values()))
        _, h, w, c = s.clip.shape
        return h, w, c


def load_data(config: TrainConfig) -> TrainData:
    """Samples plus split, from disk when ``dataset_dir`` is set, else generated in memory."""
    if config.dataset_dir:
        manifest = load_manifest(config.dataset_dir)
        samples = load_samples(config.dataset_dir)
    else:
        synth = config.synth
        samples = generate_samples(synth)
        manifest = {"clips": [{"id": sid, "class_id": s.label, "split": s.meta["split"],
                               "background": s.meta["background"]} for sid, s in samples.items()],
                    "classes": [asdict(c) for c in class_table(synth)]}
    if config.split_path:
        split = SplitManifest.load(config.split_path)
    else:
        split = split_labeled_unlabeled(manifest, config.percent_labeled, config.split_seed)
    classes = sorted(manifest["classes"], key=lambda c: c["id"])
    for sid in split.unlabeled:
        samples[sid] = samples[sid].unlabeled()
    return TrainData(samples, split, [c["name"] for c in classes],
                     {c["id"]: c["background"] for c in classes})


def steps_per_epoch(config: TrainConfig, split: SplitManifest) -> int:
    half = config.batch_size // 2
    n = len(split.unlabeled) or len(split.labeled)
    return max(1, math.ceil(n / half))


def _eval_clip(sample: Sample, clip_len: int) -> VideoClip:
    frames = sample.clip.frames
    if frames.shape[0] == clip_len:
        return sample.clip
    start = max(0, (frames.shape[0] - clip_len) // 2)
    idx = np.clip(np.arange(start, start + clip_len), 0, frames.shape[0] - 1)
    return VideoClip(frames[idx])


def _eval_sample(sample: Sample, clip_len: int) -> Sample:
    F_ = sample.clip.num_frames
    if F_ == clip_len:
        return sample
    start = max(0, (F_ - clip_len) // 2)
    idx = np.clip(np.arange(start, start + clip_len), 0, F_ - 1)
    return Sample(VideoClip(sample.clip.frames[idx]), sample.sample_id, sample.label,
                  [sample.annotations[i] for i in idx], dict(sample.meta))


@torch.no_grad()
def predict(model: Detector, samples: Sequence[Sample], batch: int = 16) -> list[tuple[str, ModelOutput]]:
    model.eval()
    T = model.config.clip_len
    out = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        logits, loc = model(clips_to_tensor([_eval_clip(s, T) for s in chunk]))
        for s, lg, lc in zip(chunk, logits, loc):
            out.append((s.sample_id, ModelOutput(lg.double().numpy(), LocalizationMap(lc.double().numpy()))))
    return out


def evaluate_model(model: Detector, data: TrainData, ids: Sequence[str],
                   mode: str = "box", binarize_thresh: float = 0.5) -> EvalReport:
    T = model.config.clip_len
    samples = [_eval_sample(data.samples[i], T) for i in ids]
    outputs = predict(model, samples)
    return evaluate_outputs(outputs, samples, data.class_names, data.class_background,
                            mode, binarize_thresh)


# checkpoints ---------------------------------------------------------------

def _named_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    mods = {"student": state.student, "teacher": state.teacher,
            "eor.student": state.eor_student, "eor.teacher": state.eor_teacher}
    for prefix, mod in mods.items():
        if mod is None:
            continue
        for name, p in mod.state_dict().items():
            arrays[f"{prefix}.{name}"] = p.detach().cpu().numpy().copy()
    opt = state.optimizer.state_dict()
    for idx, st in opt["state"].items():
        for key, val in st.items():
            arrays[f"optim.{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return arrays


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _named_arrays(state)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": state.config_hash,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "detector_frame": [state.student.config.height, state.student.config.width],
        "streams": state.streams,
        "optimizer_param_groups": state.optimizer.state_dict()["param_groups"],
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    with zipfile.ZipFile(tmp, "a") as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, default=int))
    tmp.replace(path)
    return path


def read_checkpoint_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))
    except (KeyError, zipfile.BadZipFile, OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable checkpoint manifest ({err})") from err


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> TrainState:
    """Restore a TrainState. With ``config`` given, its hash must match the checkpoint's."""
    manifest = read_checkpoint_manifest(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported format {manifest.get('format')!r}")
    stored = TrainConfig.from_dict(manifest["config"])
    if stored.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match the stored config")
    if config is not None and config.config_hash() != manifest["config_hash"]:
        raise CheckpointError(
            f"{path}: config hash {manifest['config_hash']} != requested {config.config_hash()}")
    cfg = config or stored

    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    missing = sorted(set(manifest["arrays"]) - set(arrays))
    if missing:
        raise CheckpointError(f"{path}: missing entries {missing}")

    s = arrays["student.classifier.weight"]
    num_classes = s.shape[0]
    in_ch = arrays["student.encoders.0.0.weight"].shape[1]
    h, w = manifest["detector_frame"]
    state = init_state(cfg, num_classes, h, w, in_ch)

    def fill(prefix, mod):
        if mod is None:
            return
        sd = {name: torch.from_numpy(arrays[f"{prefix}.{name}"]) for name in mod.state_dict()}
        mod.load_state_dict(sd)

    fill("student", state.student)
    fill("teacher", state.teacher)
    fill("eor.student", state.eor_student)
    fill("eor.teacher", state.eor_teacher)

    opt_state = {}
    for key, arr in arrays.items():
        if key.startswith("optim."):
            _, idx, name = key.split(".", 2)
            opt_state.setdefault(int(idx), {})[name] = torch.from_numpy(arr)
    state.optimizer.load_state_dict({"state": opt_state,
                                     "param_groups": manifest["optimizer_param_groups"]})
    state.epoch = int(manifest["epoch"])
    state.step = int(manifest["step"])
    state.streams = manifest["streams"]
    return state


# run -----------------------------------------------------------------------

@dataclass
class RunResult:
    state: TrainState
    history: list[dict]
    losses: list[L.LossBreakdown]
    final_report: Optional[EvalReport] = None


def train(config: TrainConfig, data: Optional[TrainData] = None, resume: Optional[str] = None,
          final_eval_split: Optional[str] = None) -> RunResult:
    """Run ``config.epochs`` epochs (continuing after ``resume``'s last epoch).

    Writes ``config.json``, ``losses.csv``, ``metrics.json`` and checkpoints
    under ``config.out_dir`` when it is set.
    """
    config.validate()
    data = data or load_data(config)
    h, w, c = data.frame_shape
    if resume:
        state = load_checkpoint(resume, config)
        state.config = config
    else:
        state = init_state(config, len(data.class_names), h, w, c)

    half = config.batch_size // 2
    aug = AugmentConfig(clip_len=config.clip_len, crop_enabled=config.aug_crop)
    lab_stream = SampleStream(data.split.labeled, config.seed * 1000 + 11, config.clip_len, aug)
    unl_stream = SampleStream(data.split.unlabeled, config.seed * 1000 + 23, config.clip_len, aug)
    if state.streams:
        lab_stream.set_state(state.streams["labeled"])
        unl_stream.set_state(state.streams["unlabeled"])
    n_steps = steps_per_epoch(config, data.split)

    out = Path(config.out_dir) if config.out_dir else None
    history: list[dict] = []
    all_losses: list[L.LossBreakdown] = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        if resume and (out / "metrics.json").exists():
            history = json.loads((out / "metrics.json").read_text())
        loss_file = open(out / "losses.csv", "a" if resume else "w", newline="")
        writer = csv.writer(loss_file)
        if not resume:
            writer.writerow(["step", "epoch"] + L.LossBreakdown.columns())
    try:
        for epoch in range(state.epoch, config.epochs):
            in_burn_in = epoch < config.burn_in_epochs
            lam = 0.0 if in_burn_in else L.lambda_schedule(
                epoch - config.burn_in_epochs, config.lambda_max, config.ramp_epochs, config.ramp_kind)
            for _ in range(n_steps):
                lab = lab_stream.next_batch(half, data.samples)
                unl = unl_stream.next_batch(half, data.samples) if config.use_unlabeled else []
                bd = train_step(state, lab, unl, lam)
                all_losses.append(bd)
                if out:
                    writer.writerow([state.step, epoch] + [repr(v) for v in bd.as_dict().values()])
            state.epoch = epoch + 1
            state.streams = {"labeled": lab_stream.state(), "unlabeled": unl_stream.state()}
            record = {"epoch": epoch, "step": state.step, "lambda": lam,
                      "loss": float(np.mean([b.total for b in all_losses[-n_steps:]]))}
            if config.eval_every and (epoch + 1) % config.eval_every == 0 and data.split.validation:
                model = state.teacher if config.eval_model == "teacher" else state.student
                rep = evaluate_model(model, data, data.split.validation, config.iou_mode,
                                     config.binarize_thresh)
                s = rep.summary()
                record.update({"val_f_map_0.5": s["f-mAP@0.5"], "val_v_map_0.5": s["v-mAP@0.5"],
                               "val_coherence": s["coherence"]})
            history.append(record)
            log.info("epoch %d: %s", epoch, record)
            if out:
                loss_file.flush()
                (out / "metrics.json").write_text(json.dumps(history, indent=1) + "\n")
                if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                    save_checkpoint(state, out / "checkpoint_last.npz")
    finally:
        if out:
            loss_file.close()
    if out:
        save_checkpoint(state, out / "checkpoint_final.npz")

    final = None
    if final_eval_split:
        ids = {"val": data.split.validation, "test": data.split.test}[final_eval_split]
        model = state.teacher if config.eval_model == "teacher" else state.student
        final = evaluate_model(model, data, ids, config.iou_mode, config.binarize_thresh)
    return RunResult(state, history, all_losses, final)
