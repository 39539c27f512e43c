"""Two-stage training orchestration, optimization schedule, checkpointing,
and ablation toggles.

Stage 1 jointly optimizes synthesis + registration (cycle/style, adversarial,
and registration terms) while the fusion encoder/decoder learns to
reconstruct each modality from its decomposed features. Stage 2 freezes the
PAT->pseudo-MRI generator and jointly optimizes registration and fusion
under the combined objective. Everything is deterministic given
(seed, config, dataset).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .fusion import (FusionModel, correlation_coefficient, decomposition_loss,
                     fusion_gradient_loss, fusion_intensity_loss,
                     stage1_fusion_loss)
from .image import Image
from .metrics import (MetricReport, evaluate_registration, fusion_metrics_row)
from .perceptual import PerceptualPyramid, pst_loss
from .registration import MultiLevelRegistration, registration_loss
from .synthesis import Generator, PatchDiscriminator, synthesis_forward
from .warpfield import image_to_tensor, tensor_to_image, warp_tensor

CHECKPOINT_MAGIC = b"RFCK"
CHECKPOINT_VERSION = 1
SECTION_NAMES = ("synthnet", "regnet", "fusenet.encoder", "fusenet.fusion", "fusenet.decoder")


@dataclass
class TrainConfig:
    """All hyperparameters of a run. Defaults follow the full schedule; use
    ``TrainConfig.desk()`` for the CPU-sized profile."""

    epochs_stage1: int = 40
    epochs_stage2: int = 80
    lr: float = 1e-3
    lr_halve_every: int = 20
    alpha1: float = 1.0
    alpha2: float = 2.0
    alpha3: float = 10.0
    alpha4: float = 2.0
    lambda_p: float = 1.0
    lambda_s: float = 100.0
    lambda_rev: float = 0.2
    lambda_sm: float = 10.0
    eps_cc: float = 1.01
    mu_ssim: float = 5.0
    batch_size: int = 4
    seed: int = 0
    image_size: int = 300
    use_p2m: bool = True
    use_mlr: bool = True
    joint_reg_fusion: bool = True
    two_stage: bool = True
    levels: int = 2
    synth_base: int = 16
    disc_base: int = 16
    fuse_channels: int = 64
    fuse_blocks: int = 4
    fuse_heads: int = 8
    lt_blocks: int = 1
    inn_layers: int = 2
    mlr_base: int = 16
    perceptual_seed: int = 77

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4", "lambda_p", "lambda_s",
                     "lambda_rev", "lambda_sm", "eps_cc", "mu_ssim", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.lr_halve_every < 1:
            raise ValueError("batch_size and lr_halve_every must be >= 1")
        if self.fuse_channels % self.fuse_heads:
            raise ValueError("fuse_channels must be divisible by fuse_heads")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-scale profile used by the test suite and the demos."""
        base = dict(
            epochs_stage1=8, epochs_stage2=12, image_size=64, batch_size=4,
            synth_base=8, disc_base=8, fuse_channels=16, fuse_blocks=1,
            fuse_heads=4, lt_blocks=1, inn_layers=2, mlr_base=12,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


def save_config(cfg: TrainConfig, path) -> None:
    lines = [f"{k}={v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(parse_config_text(Path(path).read_text()))


def parse_config_text(text: str) -> dict:
    """Parse flat key=value lines into typed config values."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    data = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        data[key] = coerce_config_value(key, value)
    return data


def coerce_config_value(key: str, value: str):
    kind = TrainConfig.__dataclass_fields__[key].type
    if kind in ("bool", bool):
        lowered = value.lower()
        if lowered not in ("true", "false", "1", "0"):
            raise ValueError(f"bad boolean for {key}: {value!r}")
        return lowered in ("true", "1")
    if kind in ("int", int):
        return int(value)
    if kind in ("float", float):
        return float(value)
    return value


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Initial rate halved every ``lr_halve_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halve_every)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive moment optimizer (first/second moment averaging with bias
    correction)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.addcdiv_(m / bias1, (v / bias2).sqrt_().add_(self.eps), value=-self.lr)

    def state_arrays(self) -> dict:
        out = {"step": np.array([self.step_count], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i:04d}"] = m.numpy().copy()
            out[f"v.{i:04d}"] = v.numpy().copy()
        return out

    def load_state_arrays(self, arrays: dict):
        self.step_count = int(arrays["step"][0])
        for i in range(len(self.params)):
            self.m[i] = torch.from_numpy(arrays[f"m.{i:04d}"].copy())
            self.v[i] = torch.from_numpy(arrays[f"v.{i:04d}"].copy())


# ---------------------------------------------------------------------------
# Pipeline container and checkpoints
# ---------------------------------------------------------------------------

class Pipeline:
    """All networks of the system plus the frozen feature pyramid."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.g_a = Generator(cfg.synth_base)
        self.g_b = Generator(cfg.synth_base)
        self.d_mri = PatchDiscriminator(cfg.disc_base)
        self.d_pat = PatchDiscriminator(cfg.disc_base)
        self.mlr = MultiLevelRegistration(cfg.levels, cfg.mlr_base)
        self.fusion = FusionModel(cfg.fuse_channels, cfg.fuse_blocks, cfg.fuse_heads,
                                  cfg.lt_blocks, cfg.inn_layers)
        self.pyramid = PerceptualPyramid(cfg.perceptual_seed)

    def section_modules(self) -> dict:
        return {
            "synthnet": {"g_a": self.g_a, "g_b": self.g_b, "d_mri": self.d_mri, "d_pat": self.d_pat},
            "regnet": {"mlr": self.mlr},
            "fusenet.encoder": {"encoder": self.fusion.encoder},
            "fusenet.fusion": {"fusion": self.fusion.fusion},
            "fusenet.decoder": {"decoder": self.fusion.decoder},
        }

    @torch.no_grad()
    def infer(self, pat: torch.Tensor, mri: torch.Tensor) -> dict:
        """Full inference pass honoring the config's ablation flags."""
        pseudo = self.g_a(pat) if self.cfg.use_p2m else pat
        if self.cfg.use_mlr:
            phi, registered_pseudo = self.mlr(pseudo, mri)
            registered_pat = warp_tensor(pat, phi)
        else:
            phi = torch.zeros(pat.shape[0], 2, *pat.shape[-2:], dtype=pat.dtype)
            registered_pseudo = pseudo
            registered_pat = pat
        feats_p = self.fusion.encode(registered_pat, "PAT")
        feats_m = self.fusion.encode(mri, "MRI")
        fused = self.fusion.fuse_features(feats_p, feats_m)
        return {
            "pseudo_mri": pseudo,
            "phi": phi,
            "registered_pseudo": registered_pseudo,
            "registered_pat": registered_pat,
            "fused": fused,
        }


def parameter_hash(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


@dataclass
class Checkpoint:
    """Stage tag, network sections, optimizer moments, and a config snapshot."""

    stage: str
    epoch: int
    config: TrainConfig
    sections: dict
    optim: dict = field(default_factory=dict)

    @classmethod
    def from_pipeline(cls, pipeline: Pipeline, stage: str, epoch: int, optimizers=None) -> "Checkpoint":
        sections = {}
        for section, modules in pipeline.section_modules().items():
            arrays = {}
            for prefix, module in modules.items():
                for key, tensor in module.state_dict().items():
                    arrays[f"{prefix}.{key}"] = tensor.detach().numpy().astype(np.float32).copy()
            sections[section] = arrays
        optim = {}
        for name, opt in (optimizers or {}).items():
            if opt is not None:
                optim[name] = opt.state_arrays()
        return cls(stage=stage, epoch=epoch, config=pipeline.cfg, sections=sections, optim=optim)

    def apply_to(self, pipeline: Pipeline) -> None:
        for section, modules in pipeline.section_modules().items():
            if section not in self.sections:
                raise ValueError(f"checkpoint is missing section {section!r}")
            arrays = self.sections[section]
            for prefix, module in modules.items():
                state = {}
                for key in module.state_dict():
                    full = f"{prefix}.{key}"
                    if full not in arrays:
                        raise ValueError(f"checkpoint section {section!r} is missing tensor {full!r}")
                    state[key] = torch.from_numpy(arrays[full].copy())
                module.load_state_dict(state)

    def build_pipeline(self) -> Pipeline:
        pipeline = Pipeline(self.config)
        self.apply_to(pipeline)
        return pipeline

    # -- sectioned binary serialization ------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            _write_str(fh, self.stage)
            fh.write(struct.pack("<I", self.epoch))
            config_text = "\n".join(f"{k}={v}" for k, v in self.config.to_dict().items())
            _write_str(fh, config_text)
            fh.write(struct.pack("<I", len(self.sections)))
            for name, arrays in self.sections.items():
                _write_str(fh, name)
                _write_tensor_group(fh, arrays)
            fh.write(struct.pack("<I", len(self.optim)))
            for name, arrays in self.optim.items():
                _write_str(fh, name)
                _write_tensor_group(fh, arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            stage = _read_str(fh)
            (epoch,) = struct.unpack("<I", fh.read(4))
            config = TrainConfig.from_dict(parse_config_text(_read_str(fh)))
            (n_sections,) = struct.unpack("<I", fh.read(4))
            sections = {}
            for _ in range(n_sections):
                name = _read_str(fh)
                sections[name] = _read_tensor_group(fh)
            (n_optim,) = struct.unpack("<I", fh.read(4))
            optim = {}
            for _ in range(n_optim):
                name = _read_str(fh)
                optim[name] = _read_tensor_group(fh)
        return cls(stage=stage, epoch=epoch, config=config, sections=sections, optim=optim)


def _write_str(fh, text: str) -> None:
    blob = text.encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_str(fh) -> str:
    (length,) = struct.unpack("<I", fh.read(4))
    return fh.read(length).decode("utf-8")


def _write_tensor_group(fh, arrays: dict) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        _write_str(fh, name)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        fh.write(arr.tobytes())


def _read_tensor_group(fh) -> dict:
    (count,) = struct.unpack("<I", fh.read(4))
    arrays = {}
    for _ in range(count):
        name = _read_str(fh)
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape).copy()
    return arrays


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def dataset_tensors(pairs) -> tuple:
    pat = torch.stack([image_to_tensor(p.pat).squeeze(0) for p in pairs])
    mri = torch.stack([image_to_tensor(p.mri).squeeze(0) for p in pairs])
    return pat, mri


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    if n < batch_size:
        return [order]
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def _ensure_finite(value: torch.Tensor, context: str) -> None:
    if not torch.isfinite(value.detach()).all():
        raise RuntimeError(f"non-finite loss in {context}: {float(value)}")


def _check_flags(cfg: TrainConfig) -> None:
    if cfg.use_p2m and not cfg.use_mlr:
        raise ValueError("contradictory flags: synthesis enabled without registration")


def _feature_cc(feats_p, feats_m) -> tuple:
    with torch.no_grad():
        cc_base = float(correlation_coefficient(feats_p.base, feats_m.base))
        cc_detail = float(correlation_coefficient(feats_p.detail, feats_m.detail))
    return cc_base, cc_detail


def train_stage1(cfg: TrainConfig, dataset, pipeline: Pipeline = None):
    """Joint synthesis+registration training plus fusion reconstruction.

    Returns (checkpoint, history) where history has one record per epoch.
    """
    _check_flags(cfg)
    if not dataset:
        raise ValueError("empty dataset")
    pipeline = pipeline if pipeline is not None else Pipeline(cfg)
    pat_all, mri_all = dataset_tensors(dataset)
    rng = np.random.default_rng([cfg.seed, 1])

    opt_d = opt_g = None
    if cfg.use_p2m:
        opt_d = Adam(list(pipeline.d_mri.parameters()) + list(pipeline.d_pat.parameters()), cfg.lr)
        synth_params = list(pipeline.g_a.parameters()) + list(pipeline.g_b.parameters())
        if cfg.use_mlr:
            synth_params += list(pipeline.mlr.parameters())
        opt_g = Adam(synth_params, cfg.lr)
    elif cfg.use_mlr:
        opt_g = Adam(list(pipeline.mlr.parameters()), cfg.lr)
    opt_f = Adam(list(pipeline.fusion.encoder.parameters())
                 + list(pipeline.fusion.decoder.parameters()), cfg.lr)

    history = []
    for epoch in range(cfg.epochs_stage1):
        rate = lr_at(cfg, epoch)
        for opt in (opt_d, opt_g, opt_f):
            if opt is not None:
                opt.lr = rate
        sums, n_batches = {}, 0
        for batch in _batches(len(dataset), cfg.batch_size, rng):
            pat = pat_all[batch]
            mri = mri_all[batch]
            terms = _stage1_step(cfg, pipeline, opt_d, opt_g, opt_f, pat, mri)
            for key, value in terms.items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        record = {"stage": 1, "epoch": epoch, "lr": rate}
        record.update({k: v / n_batches for k, v in sums.items()})
        history.append(record)
    ckpt = Checkpoint.from_pipeline(pipeline, "stage1", cfg.epochs_stage1,
                                    {"disc": opt_d, "synth_reg": opt_g, "fusion": opt_f})
    return ckpt, history


def _stage1_step(cfg, pipeline, opt_d, opt_g, opt_f, pat, mri) -> dict:
    terms = {}
    pseudo = pat
    if cfg.use_p2m:
        with torch.no_grad():
            fake_mri = pipeline.g_a(pat)
            fake_pat = pipeline.g_b(mri)
        loss_d = 0.5 * (((pipeline.d_mri(mri) - 1.0) ** 2).mean()
                        + (pipeline.d_mri(fake_mri) ** 2).mean()
                        + ((pipeline.d_pat(pat) - 1.0) ** 2).mean()
                        + (pipeline.d_pat(fake_pat) ** 2).mean())
        _ensure_finite(loss_d, "stage1 discriminator")
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()
        terms["loss_gan_d"] = float(loss_d)

        outs = synthesis_forward(pipeline.g_a, pipeline.g_b, pat, mri)
        pseudo = outs["pseudo_mri"]
        loss_pst = pst_loss(pipeline.pyramid, outs["pat_cycle"], pat, outs["mri_cycle"], mri,
                            cfg.lambda_p, cfg.lambda_s)
        loss_gan_g = 0.5 * (((pipeline.d_mri(pseudo) - 1.0) ** 2).mean()
                            + ((pipeline.d_pat(outs["pseudo_pat"]) - 1.0) ** 2).mean())
        terms["loss_pst"] = float(loss_pst)
        terms["loss_gan_g"] = float(loss_gan_g)
    else:
        loss_pst = loss_gan_g = torch.zeros(())

    if cfg.use_mlr:
        phi, _ = pipeline.mlr(pseudo, mri)
        loss_reg = registration_loss(pipeline.pyramid, phi, pseudo, mri,
                                     cfg.lambda_rev, cfg.lambda_sm)
        terms["loss_reg"] = float(loss_reg)
    else:
        loss_reg = torch.zeros(())

    total = loss_pst + loss_gan_g + loss_reg
    if opt_g is not None:
        _ensure_finite(total, "stage1 synthesis/registration")
        opt_g.zero_grad()
        total.backward()
        opt_g.step()
        terms["loss_synth_total"] = float(total)

    pat_recon, feats_p = pipeline.fusion.reconstruct(pat, "PAT")
    mri_recon, feats_m = pipeline.fusion.reconstruct(mri, "MRI")
    loss_fusion = stage1_fusion_loss(pat, mri, pat_recon, mri_recon, feats_p, feats_m,
                                     cfg.alpha1, cfg.alpha2, cfg.mu_ssim, cfg.eps_cc)
    _ensure_finite(loss_fusion, "stage1 fusion")
    opt_f.zero_grad()
    loss_fusion.backward()
    opt_f.step()
    terms["loss_fusion"] = float(loss_fusion)
    terms["cc_base"], terms["cc_detail"] = _feature_cc(feats_p, feats_m)
    return terms


def train_stage2(cfg: TrainConfig, dataset, stage1_ckpt: Checkpoint):
    """Freeze the PAT->pseudo-MRI generator; jointly optimize registration
    and fusion under the combined stage-2 objective."""
    _check_flags(cfg)
    if not dataset:
        raise ValueError("empty dataset")
    pipeline = stage1_ckpt.build_pipeline()
    pipeline.cfg = cfg
    for p in pipeline.g_a.parameters():
        p.requires_grad_(False)
    pat_all, mri_all = dataset_tensors(dataset)
    rng = np.random.default_rng([cfg.seed, 2])

    fusion_params = list(pipeline.fusion.parameters())
    if cfg.joint_reg_fusion:
        params = fusion_params + (list(pipeline.mlr.parameters()) if cfg.use_mlr else [])
        opt_joint, opt_reg, opt_fuse = Adam(params, cfg.lr), None, None
    else:
        opt_joint = None
        opt_reg = Adam(list(pipeline.mlr.parameters()), cfg.lr) if cfg.use_mlr else None
        opt_fuse = Adam(fusion_params, cfg.lr)

    history = []
    for epoch in range(cfg.epochs_stage2):
        rate = lr_at(cfg, cfg.epochs_stage1 + epoch)
        for opt in (opt_joint, opt_reg, opt_fuse):
            if opt is not None:
                opt.lr = rate
        sums, n_batches = {}, 0
        for batch in _batches(len(dataset), cfg.batch_size, rng):
            terms = _stage2_step(cfg, pipeline, opt_joint, opt_reg, opt_fuse,
                                 pat_all[batch], mri_all[batch])
            for key, value in terms.items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        record = {"stage": 2, "epoch": cfg.epochs_stage1 + epoch, "lr": rate}
        record.update({k: v / n_batches for k, v in sums.items()})
        history.append(record)
    ckpt = Checkpoint.from_pipeline(pipeline, "stage2", cfg.epochs_stage1 + cfg.epochs_stage2,
                                    {"joint": opt_joint, "reg": opt_reg, "fusion": opt_fuse})
    return ckpt, history


def _stage2_losses(cfg, pipeline, pat, mri, detach_registration=False):
    with torch.no_grad():
        pseudo = pipeline.g_a(pat) if cfg.use_p2m else pat
    if cfg.use_mlr:
        phi, _ = pipeline.mlr(pseudo, mri)
        registered = warp_tensor(pat, phi)
        loss_reg = registration_loss(pipeline.pyramid, phi, pseudo, mri,
                                     cfg.lambda_rev, cfg.lambda_sm)
    else:
        phi = torch.zeros(pat.shape[0], 2, *pat.shape[-2:], dtype=pat.dtype)
        registered = pat
        loss_reg = torch.zeros(())
    fusion_input = registered.detach() if detach_registration else registered
    feats_p = pipeline.fusion.encode(fusion_input, "PAT")
    feats_m = pipeline.fusion.encode(mri, "MRI")
    fused = pipeline.fusion.fuse_features(feats_p, feats_m)
    loss_int = fusion_intensity_loss(fused, fusion_input, mri)
    loss_grad = fusion_gradient_loss(fused, fusion_input, mri)
    loss_decomp = decomposition_loss(feats_p.base, feats_m.base,
                                     feats_p.detail, feats_m.detail, cfg.eps_cc)
    return loss_reg, loss_int, loss_grad, loss_decomp, feats_p, feats_m


def _stage2_step(cfg, pipeline, opt_joint, opt_reg, opt_fuse, pat, mri) -> dict:
    if cfg.joint_reg_fusion:
        loss_reg, loss_int, loss_grad, loss_decomp, feats_p, feats_m = _stage2_losses(
            cfg, pipeline, pat, mri)
        total = loss_reg + loss_int + cfg.alpha3 * loss_grad + cfg.alpha4 * loss_decomp
        _ensure_finite(total, "stage2 joint")
        opt_joint.zero_grad()
        total.backward()
        opt_joint.step()
    else:
        loss_reg, loss_int, loss_grad, loss_decomp, feats_p, feats_m = _stage2_losses(
            cfg, pipeline, pat, mri, detach_registration=True)
        fusion_total = loss_int + cfg.alpha3 * loss_grad + cfg.alpha4 * loss_decomp
        _ensure_finite(fusion_total, "stage2 fusion")
        opt_fuse.zero_grad()
        fusion_total.backward(retain_graph=cfg.use_mlr)
        opt_fuse.step()
        if opt_reg is not None:
            _ensure_finite(loss_reg, "stage2 registration")
            opt_reg.zero_grad()
            loss_reg.backward()
            opt_reg.step()
        total = loss_reg + fusion_total
    cc_base, cc_detail = _feature_cc(feats_p, feats_m)
    return {
        "loss_reg": float(loss_reg),
        "loss_int": float(loss_int),
        "loss_grad": float(loss_grad),
        "loss_decomp": float(loss_decomp),
        "loss_total": float(total),
        "cc_base": cc_base,
        "cc_detail": cc_detail,
    }


def train_single_stage(cfg: TrainConfig, dataset):
    """No two-stage split: encoder, decoder, and fusion layers train together
    under the stage-2 objective while synthesis/registration train as usual."""
    _check_flags(cfg)
    if not dataset:
        raise ValueError("empty dataset")
    pipeline = Pipeline(cfg)
    pat_all, mri_all = dataset_tensors(dataset)
    rng = np.random.default_rng([cfg.seed, 3])

    opt_d = opt_g = None
    if cfg.use_p2m:
        opt_d = Adam(list(pipeline.d_mri.parameters()) + list(pipeline.d_pat.parameters()), cfg.lr)
        opt_g = Adam(list(pipeline.g_a.parameters()) + list(pipeline.g_b.parameters()), cfg.lr)
    fusion_params = list(pipeline.fusion.parameters())
    if cfg.use_mlr and cfg.joint_reg_fusion:
        opt_fuse = Adam(fusion_params + list(pipeline.mlr.parameters()), cfg.lr)
        opt_reg = None
    else:
        opt_fuse = Adam(fusion_params, cfg.lr)
        opt_reg = Adam(list(pipeline.mlr.parameters()), cfg.lr) if cfg.use_mlr else None

    history = []
    total_epochs = cfg.epochs_stage1 + cfg.epochs_stage2
    for epoch in range(total_epochs):
        rate = lr_at(cfg, epoch)
        for opt in (opt_d, opt_g, opt_fuse, opt_reg):
            if opt is not None:
                opt.lr = rate
        sums, n_batches = {}, 0
        for batch in _batches(len(dataset), cfg.batch_size, rng):
            pat = pat_all[batch]
            mri = mri_all[batch]
            terms = {}
            if cfg.use_p2m:
                terms.update(_synthesis_only_step(cfg, pipeline, opt_d, opt_g, pat, mri))
            terms.update(_single_stage_fusion_step(cfg, pipeline, opt_fuse, opt_reg, pat, mri))
            for key, value in terms.items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        record = {"stage": 0, "epoch": epoch, "lr": rate}
        record.update({k: v / n_batches for k, v in sums.items()})
        history.append(record)
    ckpt = Checkpoint.from_pipeline(pipeline, "single", total_epochs,
                                    {"disc": opt_d, "synth": opt_g, "fusion": opt_fuse, "reg": opt_reg})
    return ckpt, history


def _synthesis_only_step(cfg, pipeline, opt_d, opt_g, pat, mri) -> dict:
    with torch.no_grad():
        fake_mri = pipeline.g_a(pat)
        fake_pat = pipeline.g_b(mri)
    loss_d = 0.5 * (((pipeline.d_mri(mri) - 1.0) ** 2).mean()
                    + (pipeline.d_mri(fake_mri) ** 2).mean()
                    + ((pipeline.d_pat(pat) - 1.0) ** 2).mean()
                    + (pipeline.d_pat(fake_pat) ** 2).mean())
    opt_d.zero_grad()
    loss_d.backward()
    opt_d.step()
    outs = synthesis_forward(pipeline.g_a, pipeline.g_b, pat, mri)
    loss_pst = pst_loss(pipeline.pyramid, outs["pat_cycle"], pat, outs["mri_cycle"], mri,
                        cfg.lambda_p, cfg.lambda_s)
    loss_gan_g = 0.5 * (((pipeline.d_mri(outs["pseudo_mri"]) - 1.0) ** 2).mean()
                        + ((pipeline.d_pat(outs["pseudo_pat"]) - 1.0) ** 2).mean())
    total = loss_pst + loss_gan_g
    _ensure_finite(total, "single-stage synthesis")
    opt_g.zero_grad()
    total.backward()
    opt_g.step()
    return {"loss_pst": float(loss_pst), "loss_gan_g": float(loss_gan_g), "loss_gan_d": float(loss_d)}


def _single_stage_fusion_step(cfg, pipeline, opt_fuse, opt_reg, pat, mri) -> dict:
    detach = not cfg.joint_reg_fusion
    loss_reg, loss_int, loss_grad, loss_decomp, feats_p, feats_m = _stage2_losses(
        cfg, pipeline, pat, mri, detach_registration=detach)
    if cfg.joint_reg_fusion:
        total = loss_reg + loss_int + cfg.alpha3 * loss_grad + cfg.alpha4 * loss_decomp
        _ensure_finite(total, "single-stage joint")
        opt_fuse.zero_grad()
        total.backward()
        opt_fuse.step()
    else:
        fusion_total = loss_int + cfg.alpha3 * loss_grad + cfg.alpha4 * loss_decomp
        _ensure_finite(fusion_total, "single-stage fusion")
        opt_fuse.zero_grad()
        fusion_total.backward(retain_graph=cfg.use_mlr)
        opt_fuse.step()
        if opt_reg is not None:
            opt_reg.zero_grad()
            loss_reg.backward()
            opt_reg.step()
        total = loss_reg + fusion_total
    cc_base, cc_detail = _feature_cc(feats_p, feats_m)
    return {
        "loss_reg": float(loss_reg), "loss_int": float(loss_int),
        "loss_grad": float(loss_grad), "loss_decomp": float(loss_decomp),
        "loss_total": float(total), "cc_base": cc_base, "cc_detail": cc_detail,
    }


def train(cfg: TrainConfig, dataset) -> dict:
    """Run the configured training scheme end to end.

    Returns {"final": Checkpoint, "history": [...]} plus "stage1" when the
    two-stage scheme is active.
    """
    if cfg.two_stage:
        ckpt1, history1 = train_stage1(cfg, dataset)
        ckpt2, history2 = train_stage2(cfg, dataset, ckpt1)
        return {"stage1": ckpt1, "final": ckpt2, "history": history1 + history2}
    ckpt, history = train_single_stage(cfg, dataset)
    return {"final": ckpt, "history": history}


def write_history(history, path) -> None:
    """Loss-curve log: one CSV row per epoch with every named term."""
    keys = ["stage", "epoch", "lr"]
    extra = sorted({k for rec in history for k in rec} - set(keys))
    columns = keys + extra
    lines = [",".join(columns)]
    for rec in history:
        lines.append(",".join(_format_log_value(rec.get(k)) for k in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def _format_log_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{value:.17g}"


# ---------------------------------------------------------------------------
# Evaluation and ablation
# ---------------------------------------------------------------------------

@torch.no_grad()
def evaluate_pipeline(pipeline: Pipeline, pairs) -> dict:
    """Registration and fusion metric reports for a set of phantom pairs.

    Fusion metrics are computed against the fusion inputs (registered PAT
    and fixed MRI)."""
    reg_rows = []
    fused_imgs, sources = [], []
    for pair in pairs:
        out = pipeline.infer(image_to_tensor(pair.pat), image_to_tensor(pair.mri))
        registered = tensor_to_image(out["registered_pat"], "PAT")
        fused = tensor_to_image(out["fused"], "FUSED")
        reg_rows.append((pair, registered))
        fused_imgs.append(fused)
        sources.append((registered, pair.mri))
    registration = evaluate_registration([p for p, _ in reg_rows],
                                         [img for _, img in reg_rows])
    fusion_rows = np.array([fusion_metrics_row(f, a, b)
                            for f, (a, b) in zip(fused_imgs, sources)])
    from .metrics import FUSION_COLUMNS
    fusion = MetricReport(columns=FUSION_COLUMNS, per_image={"fused": fusion_rows})
    return {"registration": registration, "fusion": fusion}


DEFAULT_ABLATION_VARIANTS = (
    ("none", {"use_p2m": False, "use_mlr": False}),
    ("mlr_only", {"use_p2m": False, "use_mlr": True}),
    ("full", {"use_p2m": True, "use_mlr": True}),
)


@dataclass
class AblationReport:
    """Per-configuration registration/fusion means mirroring the component
    toggle table."""

    rows: dict  # label -> {"registration": {...}, "fusion": {...}}

    def to_csv(self) -> str:
        from .metrics import FUSION_COLUMNS, REGISTRATION_COLUMNS
        header = ["config"] + [f"reg_{c}" for c in REGISTRATION_COLUMNS] \
            + [f"fuse_{c}" for c in FUSION_COLUMNS]
        lines = [",".join(header)]
        for label, row in self.rows.items():
            values = [row["registration"][c] for c in REGISTRATION_COLUMNS]
            values += [row["fusion"][c] for c in FUSION_COLUMNS]
            lines.append(label + "," + ",".join(f"{v:.17g}" for v in values))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = []
        for label, row in self.rows.items():
            for group in ("registration", "fusion"):
                lines.extend(f"{label}.{group}.{k}={v:.17g}" for k, v in row[group].items())
        return "\n".join(lines) + "\n"


def run_ablation(cfg: TrainConfig, train_pairs, eval_pairs=None, variants=None) -> AblationReport:
    """Train and evaluate the component-toggle configurations.

    With registration disabled, the pipeline fuses the unaligned inputs and
    its registration row equals the misaligned baseline."""
    eval_pairs = eval_pairs if eval_pairs is not None else train_pairs
    variants = variants if variants is not None else DEFAULT_ABLATION_VARIANTS
    rows = {}
    for label, flags in variants:
        variant_cfg = replace(cfg, **flags)
        _check_flags(variant_cfg)
        result = train(variant_cfg, train_pairs)
        pipeline = result["final"].build_pipeline()
        reports = evaluate_pipeline(pipeline, eval_pairs)
        rows[label] = {
            "registration": reports["registration"].means("registered"),
            "fusion": reports["fusion"].means("fused"),
        }
    return AblationReport(rows=rows)
