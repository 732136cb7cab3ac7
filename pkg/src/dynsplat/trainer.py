"""End-to-end optimization of the motion model: per-iteration timestep and
dedup-set sampling, the full loss stack, Adam updates, and checkpoint state.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .canonical import DedupMaskSet, GaussianGrid
from .config import TrainConfig
from .losses import (NeighborGraph, coarse_isometry_loss, dense_isometry_loss,
                     depth_loss, photometric_loss, reprojection_loss, rigidity_loss,
                     total_loss, tracking_loss)
from .motion import MotionModel
from .renderer import AttributeCompositor, GaussianBatch, RenderOptions, splat_forward
from .synthdata import FrameObs, TrackSet
from .tgeom import CameraTensors, quat_multiply_t, quat_normalize_t, quat_rotate_t


@dataclass
class TrainData:
    """Dynamic-sequence supervision: frames plus 2D/depth track targets."""

    frames: list[FrameObs]
    tracks: TrackSet | None

    @property
    def timesteps(self) -> int:
        return len(self.frames)


@dataclass
class Checkpoint:
    grids: list[GaussianGrid]
    dedup_sets: list[DedupMaskSet]
    model_variant: str
    model_state: dict            # name -> tensor
    optimizer_state: dict        # flattened Adam slots
    iteration: int
    config_hash: str
    rng_state: dict
    total_timesteps: int
    seed: int


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps({
        "lr": config.learning_rate, "iters": config.iterations,
        "seed": config.seed, "betas": list(config.adam_betas),
        "eps": config.adam_eps, "ablation": config.ablation,
        "cull": config.cull_sigma,
        "weights": vars(config.weights),
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class Trainer:
    """Owns the motion model, the frozen canonical context, and the loop."""

    def __init__(self, config: TrainConfig, grids: list[GaussianGrid],
                 dedup_sets: list[DedupMaskSet], data: TrainData,
                 model: MotionModel | None = None):
        torch.use_deterministic_algorithms(True)
        self.config = config
        self.grids = grids
        self.dedup_sets = dedup_sets
        self.data = data
        self.t_total = data.timesteps
        self.render_opts = RenderOptions(cull_sigma=config.cull_sigma)

        variant = {"none": "cnn", "no_crs_iso": "cnn", "no_dense_iso": "cnn",
                   "no_rigid": "cnn", "mlp": "mlp", "no_dmp_direct": "direct_grid"}
        self.model = model or MotionModel(
            variant[config.ablation], seed=config.seed,
            grid_shape=grids[0].shape, n_views=len(grids),
            total_timesteps=self.t_total)

        self._freeze_canonical()
        self._build_reference_structures()

        self.optimizer = torch.optim.Adam(self.model.parameters(),
                                          lr=config.learning_rate,
                                          betas=config.adam_betas,
                                          eps=config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0

    # -- frozen context -----------------------------------------------------

    def _freeze_canonical(self):
        """Concatenate every grid's valid pixels into one canonical batch."""
        batches = []
        self._grid_valid = []
        for g in self.grids:
            valid = g.validity.reshape(-1).bool()
            self._grid_valid.append(valid)
            batches.append(g.gaussian_batch())
        self.canonical = GaussianBatch(
            means=torch.cat([b.means for b in batches]).detach(),
            scales=torch.cat([b.scales for b in batches]).detach(),
            quats=torch.cat([b.quats for b in batches]).detach(),
            opacities=torch.cat([b.opacities for b in batches]).detach(),
            colors=torch.cat([b.colors for b in batches]).detach(),
            features=torch.cat([b.features for b in batches]).detach(),
            fg_probs=torch.cat([b.fg_probs for b in batches]).detach())
        self._grid_sizes = [int(v.sum()) for v in self._grid_valid]

    def _set_mask(self, ds: DedupMaskSet) -> torch.Tensor:
        """Membership of each canonical (valid-pixel) Gaussian in a dedup set."""
        parts = []
        for g, valid, m in zip(self.grids, self._grid_valid, ds.masks):
            parts.append(m.reshape(-1)[valid.nonzero().squeeze(-1)].bool())
        return torch.cat(parts)

    def _build_reference_structures(self):
        ref_cam = self.data.frames[0].camera
        self.ref_camera = ref_cam
        self.active_masks = [self._set_mask(ds) for ds in self.dedup_sets]

        # losses evaluate on the fixed dedup-set-0 subset
        self.loss_mask = self.active_masks[0]
        loss_pos = self.canonical.means[self.loss_mask]
        loss_feat = self.canonical.features[self.loss_mask]
        self.graph = NeighborGraph.build(loss_pos.numpy(), loss_feat.numpy(),
                                         seed=self.config.seed,
                                         beta=self.config.weights.beta)
        self.loss_pos_canonical = loss_pos

        self.compositors = []
        self.ref_px_maps = []
        cam_ref_t = CameraTensors(ref_cam)
        for mask in self.active_masks:
            subset = self.canonical.subset(mask)
            comp = AttributeCompositor(subset, ref_cam, options=self.render_opts)
            px_ref, _ = cam_ref_t.project_points(subset.means)
            self.compositors.append(comp)
            self.ref_px_maps.append(comp.composite(px_ref).detach())

        if self.data.tracks is not None:
            self.query_px = torch.as_tensor(self.data.tracks.query_px)
            self.target_px = torch.as_tensor(self.data.tracks.px)
        else:
            self.query_px = None
        self.targets = [
            dict(image=torch.as_tensor(f.image), depth=torch.as_tensor(f.depth),
                 mask=torch.as_tensor(f.mask)) for f in self.data.frames]

    # -- one optimization step ----------------------------------------------

    def deform_all(self, t: int):
        """Predict fields for every grid and deform all valid canonical pixels."""
        quats, trans = [], []
        for g, valid in zip(self.grids, self._grid_valid):
            fld = self.model.forward(g, t, self.t_total)
            quats.append(fld.quaternion.reshape(-1, 4)[valid])
            trans.append(fld.translation.reshape(-1, 3)[valid])
        q = quat_normalize_t(torch.cat(quats))
        d = torch.cat(trans)
        means = quat_rotate_t(q, self.canonical.means) + d
        rots = quat_multiply_t(q, self.canonical.quats)
        return means, rots, q

    def compute_losses(self, t: int, set_idx: int):
        means, rots, dq = self.deform_all(t)
        mask = self.active_masks[set_idx]
        target = self.targets[t - 1]
        cam_t = self.data.frames[t - 1].camera

        batch = GaussianBatch(
            means=means[mask], scales=self.canonical.scales[mask],
            quats=rots[mask], opacities=self.canonical.opacities[mask],
            colors=self.canonical.colors[mask])
        render, _ = splat_forward(batch, cam_t, options=self.render_opts)

        comps = {"photo": photometric_loss(render.color, target["image"],
                                           self.config.weights.ssim)}
        fg = target["mask"] & (render.alpha.detach() > 0.5)
        comps["depth"] = depth_loss(render.depth, target["depth"], fg)

        if self.query_px is not None:
            cam_tt = CameraTensors(cam_t)
            px_t, z_t = cam_tt.project_points(means[mask])
            attr = torch.cat([px_t, z_t.unsqueeze(-1)], dim=1)
            comp_map = self.compositors[set_idx].composite(attr)
            track, _ = tracking_loss(comp_map[..., :2], self.ref_px_maps[set_idx],
                                     self.compositors[set_idx].alpha,
                                     self.query_px, self.target_px[t - 1])
            reproj, _ = reprojection_loss(comp_map[..., 2],
                                          self.compositors[set_idx].alpha,
                                          target["depth"], self.query_px,
                                          self.target_px[t - 1])
            comps["track"] = track
            comps["reproj"] = reproj

        abl = self.config.ablation
        if abl != "no_crs_iso":
            comps["crs_iso"] = coarse_isometry_loss(
                self.graph, self.loss_pos_canonical, means[self.loss_mask])
        if abl != "no_dense_iso":
            comps["dense_iso"] = dense_isometry_loss(
                self.graph, self.loss_pos_canonical, means[self.loss_mask])
        if abl != "no_rigid":
            comps["rigid"] = rigidity_loss(self.graph, dq[self.loss_mask])
        return comps

    def step(self, t: int, set_idx: int) -> dict:
        comps = self.compute_losses(t, set_idx)
        total = total_loss(comps, self.config.weights)
        if not torch.isfinite(total):
            dump = {k: float(v) for k, v in comps.items()}
            raise RuntimeError(f"non-finite loss at iteration {self.iteration}: {dump}")
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.iteration += 1
        out = {k: float(v) for k, v in comps.items()}
        out["total"] = float(total)
        return out

    def sample_step(self) -> dict:
        t = int(self.rng.integers(1, self.t_total + 1))
        s = int(self.rng.integers(len(self.dedup_sets)))
        return self.step(t, s)

    # -- loop and state -----------------------------------------------------

    def train(self, log_path=None) -> list[dict]:
        log = []
        sink = open(log_path, "a") if log_path else None
        try:
            for _ in range(self.config.iterations):
                rec = self.sample_step()
                if self.iteration % self.config.log_every == 0 or \
                        self.iteration == self.config.iterations:
                    entry = {"iter": self.iteration,
                             "L_photo": rec.get("photo", 0.0),
                             "L_track": rec.get("track", 0.0),
                             "L_depth": rec.get("depth", 0.0),
                             "L_reproj": rec.get("reproj", 0.0),
                             "L_crs_iso": rec.get("crs_iso", 0.0),
                             "L_dense_iso": rec.get("dense_iso", 0.0),
                             "L_rigid": rec.get("rigid", 0.0),
                             "total": rec["total"]}
                    log.append(entry)
                    if sink:
                        sink.write(json.dumps(entry) + "\n")
                        sink.flush()
        finally:
            if sink:
                sink.close()
        return log

    def checkpoint(self) -> Checkpoint:
        model_state = {k: v.detach().clone()
                       for k, v in self.model.named_parameters().items()}
        opt_state = _optimizer_state_arrays(self.optimizer)
        return Checkpoint(
            grids=self.grids, dedup_sets=self.dedup_sets,
            model_variant=self.model.variant, model_state=model_state,
            optimizer_state=opt_state, iteration=self.iteration,
            config_hash=config_hash(self.config),
            rng_state=self.rng.bit_generator.state,
            total_timesteps=self.t_total, seed=self.config.seed)

    def restore(self, ckpt: Checkpoint):
        named = self.model.named_parameters()
        for k, v in ckpt.model_state.items():
            named[k].data.copy_(v)
        _load_optimizer_state(self.optimizer, ckpt.optimizer_state)
        self.iteration = ckpt.iteration
        self.rng.bit_generator.state = ckpt.rng_state

    # -- evaluation-time helpers ---------------------------------------------

    def deformed_batch(self, t: int, set_idx: int = 0) -> GaussianBatch:
        """Deformed Gaussians of one dedup set at timestep t (no grad)."""
        with torch.no_grad():
            means, rots, _ = self.deform_all(t)
        mask = self.active_masks[set_idx]
        return GaussianBatch(
            means=means[mask], scales=self.canonical.scales[mask],
            quats=rots[mask], opacities=self.canonical.opacities[mask],
            colors=self.canonical.colors[mask],
            features=self.canonical.features[mask],
            fg_probs=self.canonical.fg_probs[mask])


def _optimizer_state_arrays(opt: torch.optim.Adam) -> dict:
    out = {}
    params = opt.param_groups[0]["params"]
    for i, p in enumerate(params):
        st = opt.state.get(p, {})
        if st:
            out[f"{i}.step"] = np.array([float(st["step"])])
            out[f"{i}.exp_avg"] = st["exp_avg"].numpy().copy()
            out[f"{i}.exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
    return out


def _load_optimizer_state(opt: torch.optim.Adam, arrays: dict):
    params = opt.param_groups[0]["params"]
    for i, p in enumerate(params):
        key = f"{i}.step"
        if key in arrays:
            opt.state[p] = {
                "step": torch.tensor(float(arrays[f"{i}.step"][0])),
                "exp_avg": torch.as_tensor(arrays[f"{i}.exp_avg"]).clone(),
                "exp_avg_sq": torch.as_tensor(arrays[f"{i}.exp_avg_sq"]).clone(),
            }


def train_step(trainer: Trainer, t: int, set_idx: int) -> Trainer:
    """Single optimization step at a given timestep and dedup set."""
    trainer.step(t, set_idx)
    return trainer
