"""Two-phase training: backbone pretraining with a plain segmentation head,
then joint training of the full query decoder with a frozen-then-damped
backbone learning rate. Fully deterministic under a fixed config and seed."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from ..errors import NonFiniteLossError
from ..losses import QDPartition, seg_loss_parts, total_loss
from ..model import ClusterSegmenter
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, config_hash, output_root
from .data import augment_pair, ensure_dataset, epoch_order, image_to_tensor, load_partition

__all__ = ["RunRecord", "train"]


@dataclass
class RunRecord:
    """Everything needed to audit or resume one training run."""

    config_hash: str
    config_json: str
    run_dir: str
    checkpoint_backbone: str | None
    checkpoint_final: str
    loss_history: list[dict]
    wall_clock_s: float
    log_path: str
    report_path: str | None = None

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


class _TrainState:
    """Shared bookkeeping across both phases of one run."""

    def __init__(self, run_dir: Path):
        self.step = 0
        self.epoch = 0  # global epoch counter, phases share it for shuffling
        self.history: list[dict] = []
        self.log_path = run_dir / "train_log.jsonl"
        self.log_fh = open(self.log_path, "w")
        self.run_dir = run_dir

    def log_step(self, phase: int, breakdown: dict) -> None:
        entry = {"step": self.step, "phase": phase, "epoch": self.epoch, **breakdown}
        self.log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self.step += 1

    def log_epoch(self, phase: int, term_sums: dict, n_batches: int) -> None:
        means = {k: v / max(n_batches, 1) for k, v in term_sums.items()}
        self.history.append({"phase": phase, "epoch": self.epoch, **means})
        self.epoch += 1

    def close(self):
        self.log_fh.close()


def _volume_arrays(volumes, num_classes_train: int, augment: bool, seed: int, epoch: int):
    """Per-epoch (images, targets) tensors; augmentation resamples each epoch."""
    images, targets = [], []
    for idx, vol in enumerate(volumes):
        image, masks = vol.image, vol.masks
        if augment:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 104729, epoch, idx]))
            image, masks = augment_pair(image, masks, rng)
        images.append(image_to_tensor(image))
        planes = masks[:num_classes_train].reshape(num_classes_train, -1)
        targets.append(torch.from_numpy(planes.astype(np.float32)))
    return torch.stack(images), torch.stack(targets)


def _check_finite(loss, images, targets, state: _TrainState, phase: int):
    if torch.isfinite(loss):
        return
    dump = state.run_dir / "diagnostic_batch.npz"
    np.savez(
        dump,
        images=images.detach().numpy(),
        targets=targets.detach().numpy(),
        step=np.array(state.step),
        phase=np.array(phase),
    )
    state.close()
    raise NonFiniteLossError(
        f"non-finite loss at phase {phase} step {state.step}; batch dumped", str(dump)
    )


def _poly_lr(base: float, epoch: int, total: int, power: float) -> float:
    if total <= 0:
        return base
    return base * (1.0 - epoch / total) ** power


def train(config: ExperimentConfig, root: str | Path | None = None) -> RunRecord:
    """Run the configured training and write checkpoints, logs and the run
    record under `<root>/<config.output_dir>`."""
    torch.set_num_threads(1)  # keeps runs bit-reproducible across hosts
    started = time.perf_counter()

    run_dir = output_root(str(root) if root else None) / config.output_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_json = config.to_json()
    (run_dir / "config.json").write_text(cfg_json)
    cfg_hash = config_hash(config)

    manifest, cases_dir = ensure_dataset(config, run_dir)
    volumes = load_partition(config.phantom, manifest, "train", cases_dir)
    k_train = config.phantom.num_classes_train
    partition = QDPartition(*config.model.partition)
    opt_cfg = config.optim

    torch.manual_seed(opt_cfg.seed)
    model = ClusterSegmenter(config.model_config())
    state = _TrainState(run_dir)

    two_phase = opt_cfg.two_phase
    e1 = opt_cfg.epochs_phase1 if two_phase else 0
    e2 = opt_cfg.epochs_phase2 if two_phase else opt_cfg.epochs_phase1 + opt_cfg.epochs_phase2
    backbone_mult = opt_cfg.backbone_lr_multiplier if two_phase else 1.0

    def run_epoch(phase: int, compute_loss, optimizer, lr_scale: float):
        for group in optimizer.param_groups:
            group["lr"] = group["base_lr"] * lr_scale
        images_all, targets_all = _volume_arrays(
            volumes, k_train, opt_cfg.augment, opt_cfg.seed, state.epoch
        )
        order = epoch_order(len(volumes), state.epoch, opt_cfg.seed)
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(order), opt_cfg.batch_size):
            idx = torch.from_numpy(order[start : start + opt_cfg.batch_size].copy())
            images, targets = images_all[idx], targets_all[idx]
            loss, breakdown = compute_loss(images, targets)
            _check_finite(loss, images, targets, state, phase)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            state.log_step(phase, breakdown)
            for key, value in breakdown.items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        state.log_epoch(phase, sums, n_batches)

    def phase1_loss(images, targets):
        logits = model.forward_backbone(images)
        total, ce, dice_term = seg_loss_parts(logits, targets)
        return total, {
            "L": float(total.detach()),
            "L_seg": float(total.detach()),
            "L_ce": float(ce.detach()),
            "L_dice": float(dice_term.detach()),
            "L_qd": 0.0,
            "L_ds": 0.0,
        }

    def phase2_loss(images, targets):
        out = model(images)
        return total_loss(
            out.seg_logits,
            out.assignments,
            targets,
            partition,
            qd_weight=config.loss.qd_weight,
            aux_attention=out.aux_attention,
            ds_weight=config.loss.ds_weight,
            grid=config.phantom.shape,
        )

    checkpoint_backbone = None
    if e1 > 0:
        opt1 = torch.optim.Adam(model.backbone_parameters(), lr=opt_cfg.learning_rate)
        for group in opt1.param_groups:
            group["base_lr"] = opt_cfg.learning_rate
        for epoch in range(e1):
            scale = (
                _poly_lr(1.0, epoch, e1, opt_cfg.poly_power) if opt_cfg.poly_decay else 1.0
            )
            run_epoch(1, phase1_loss, opt1, scale)
        checkpoint_backbone = str(
            save_checkpoint(model, run_dir / "checkpoint_backbone.npz", cfg_hash, "backbone", cfg_json)
        )

    if e2 > 0:
        opt2 = torch.optim.Adam(
            [
                {"params": list(model.decoder_parameters()), "base_lr": opt_cfg.learning_rate},
                {
                    "params": list(model.backbone_parameters()),
                    "base_lr": opt_cfg.learning_rate * backbone_mult,
                },
            ],
            lr=opt_cfg.learning_rate,
        )
        freeze_epochs = math.ceil(opt_cfg.freeze_fraction * e2) if two_phase else 0
        for epoch in range(e2):
            frozen = epoch < freeze_epochs
            for p in model.backbone_parameters():
                p.requires_grad_(not frozen)
            scale = (
                _poly_lr(1.0, epoch, e2, opt_cfg.poly_power) if opt_cfg.poly_decay else 1.0
            )
            run_epoch(2, phase2_loss, opt2, scale)
        for p in model.backbone_parameters():
            p.requires_grad_(True)

    checkpoint_final = str(
        save_checkpoint(model, run_dir / "checkpoint_final.npz", cfg_hash, "joint", cfg_json)
    )
    state.close()

    record = RunRecord(
        config_hash=cfg_hash,
        config_json=cfg_json,
        run_dir=str(run_dir),
        checkpoint_backbone=checkpoint_backbone,
        checkpoint_final=checkpoint_final,
        loss_history=state.history,
        wall_clock_s=time.perf_counter() - started,
        log_path=str(state.log_path),
    )
    record.save(run_dir / "run_record.json")
    return record
