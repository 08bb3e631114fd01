"""Two-stage optimization: a reconstruction network, then adversarial refinement.

Stage 1 trains the synthesis FCN alone with the intensity-weighted L2 loss.
Stage 2 freezes it and trains a U-Net generator against a discriminator: the
generator reads the CT (with small clipped Gaussian noise added) concatenated
with the frozen FCN output, the discriminator reads (FCN output, CT, real or
generated PET) and the two take alternating Adam steps, one each per
iteration.

Determinism: every random draw comes from a generator derived as
``default_rng([seed, stream, counter])``, so a run is bit-reproducible and a
checkpoint resumed at step k continues exactly the trajectory of an
uninterrupted run.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .dataprep import AugmentConfig, add_input_noise, augment
from .net import build_network, forward, backward, init_params
from .net.graph import NetworkGraph
from .volume import Modality, Volume3D

# rng stream tags
_STREAM_INIT_FCN = 0
_STREAM_INIT_GEN = 1
_STREAM_INIT_DISC = 2
_STREAM_EPOCH = 1000
_STREAM_STEP = 2000

# discriminator input channel order: (fcn output, ct, real-or-generated pet)
_D_FCN, _D_CT, _D_IMG = 0, 1, 2


class TrainingDivergence(RuntimeError):
    """Raised when a loss becomes non-finite during optimization."""


class CheckpointError(Exception):
    """Raised for unreadable or structurally invalid checkpoint files."""


@dataclass
class TrainConfig:
    """Optimization hyperparameters shared by both stages."""

    learning_rate: float = 1e-5
    batch_size: int = 4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 20.0
    suv_threshold: float = losses.SPLIT_THRESHOLD_NORM
    max_steps: int = 100
    seed: int = 0
    width_scale: float = 1.0
    input_size: tuple[int, int] = (512, 512)
    augment: bool = True
    noise_bound: float = 0.005
    joint_finetune: bool = False
    eval_every: int = 0
    patience: int = 5

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        self.input_size = tuple(self.input_size)


@dataclass
class TrainState:
    """Parameters, Adam moments, and the loss history of one training stage."""

    kind: str  # "fcn" or "cgan"
    cfg: TrainConfig
    gen_graph: NetworkGraph
    gen_params: dict
    gen_m: dict
    gen_v: dict
    disc_graph: NetworkGraph | None = None
    disc_params: dict | None = None
    disc_m: dict | None = None
    disc_v: dict | None = None
    fcn_graph: NetworkGraph | None = None
    fcn_params: dict | None = None
    fcn_m: dict | None = None
    fcn_v: dict | None = None
    step: int = 0
    history: list = field(default_factory=list)

    def record(self, step: int, name: str, value: float) -> None:
        self.history.append((step, name, float(value)))


def _zero_moments(params: dict) -> tuple[dict, dict]:
    m = {k: {n: np.zeros_like(a) for n, a in v.items()} for k, v in params.items()}
    v_ = {k: {n: np.zeros_like(a) for n, a in v.items()} for k, v in params.items()}
    return m, v_


def _adam_step(params, grads, m, v, t, cfg: TrainConfig) -> None:
    """One in-place Adam update; layers absent from grads are left untouched."""
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for lname, lgrads in grads.items():
        for key, g in lgrads.items():
            g = g.astype(np.float32, copy=False)
            m[lname][key] = b1 * m[lname][key] + (1 - b1) * g
            v[lname][key] = b2 * v[lname][key] + (1 - b2) * g * g
            m_hat = m[lname][key] / corr1
            v_hat = v[lname][key] / corr2
            params[lname][key] = params[lname][key] - cfg.learning_rate * m_hat / (
                np.sqrt(v_hat) + cfg.adam_eps)


class _Sampler:
    """Maps a global step to slice indices via per-epoch shuffles.

    Sample s of the run (s = (step-1)*batch + j) reads position s mod n of the
    permutation for epoch s div n.  Permutations are derived from the seed, so
    any step's batch is recomputable without replaying earlier steps.
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            rng = np.random.default_rng([self.seed, _STREAM_EPOCH, epoch])
            self._perms = {epoch: rng.permutation(self.n)}  # keep only the active epoch
        return self._perms[epoch]

    def batch(self, step: int) -> list[int]:
        s0 = (step - 1) * self.batch_size
        return [int(self._perm((s0 + j) // self.n)[(s0 + j) % self.n])
                for j in range(self.batch_size)]


def _check_data(data, cfg: TrainConfig) -> None:
    if not data:
        raise ValueError("training set is empty")
    for ct, pet in data:
        if ct.shape != cfg.input_size or pet.shape != cfg.input_size:
            raise ValueError(f"slice shape {ct.shape} does not match "
                             f"configured input size {cfg.input_size}")


def _make_batch(data, idxs, cfg: TrainConfig, rng, with_noise: bool):
    """Stack an augmented NHWC CT batch and its PET target batch."""
    aug_cfg = AugmentConfig(noise_bound=cfg.noise_bound, seed=cfg.seed)
    cts, pets = [], []
    for i in idxs:
        ct, pet = data[i]
        if cfg.augment:
            ct, pet = augment((ct, pet), aug_cfg, rng)
        cts.append(ct)
        pets.append(pet)
    ct_b = np.stack(cts)[..., None].astype(np.float32)
    pet_b = np.stack(pets)[..., None].astype(np.float32)
    ct_noised = ct_b
    if with_noise and cfg.noise_bound > 0:
        noised = [add_input_noise(ct_b[j, :, :, 0], aug_cfg, rng) for j in range(len(idxs))]
        ct_noised = np.stack(noised)[..., None]
    return ct_b, ct_noised, pet_b


def _require_finite(value: float, name: str, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingDivergence(f"{name} became non-finite ({value}) at step {step}")


def _val_loss(loss_fn, graphs_forward, val_data, cfg: TrainConfig) -> float:
    total, count = 0.0, 0
    for i in range(0, len(val_data), cfg.batch_size):
        chunk = val_data[i: i + cfg.batch_size]
        ct = np.stack([c for c, _ in chunk])[..., None].astype(np.float32)
        pet = np.stack([p for _, p in chunk])[..., None].astype(np.float32)
        pred = graphs_forward(ct)
        total += loss_fn(pred, pet) * len(chunk)
        count += len(chunk)
    return total / count


def train_fcn(data, cfg: TrainConfig, val_data=None) -> TrainState:
    """Stage 1: fit the synthesis FCN with the weighted L2 loss."""
    _check_data(data, cfg)
    graph = build_network("FCN4s", 1, cfg.input_size, cfg.width_scale)
    params = init_params(graph, np.random.default_rng([cfg.seed, _STREAM_INIT_FCN]))
    m, v = _zero_moments(params)
    state = TrainState(kind="fcn", cfg=cfg, gen_graph=graph, gen_params=params,
                       gen_m=m, gen_v=v)
    _run_fcn_steps(state, data, val_data, until_step=cfg.max_steps)
    return state


def _run_fcn_steps(state: TrainState, data, val_data, until_step: int) -> None:
    cfg = state.cfg
    _check_data(data, cfg)
    sampler = _Sampler(len(data), cfg.batch_size, cfg.seed)
    best_val, stale = np.inf, 0
    for step in range(state.step + 1, until_step + 1):
        rng = np.random.default_rng([cfg.seed, _STREAM_STEP, step])
        ct, _, pet = _make_batch(data, sampler.batch(step), cfg, rng, with_noise=False)
        pred, cache = forward(state.gen_graph, state.gen_params, ct, return_cache=True)
        loss = losses.weighted_l2_loss(pred, pet)
        _require_finite(loss, "fcn loss", step)
        grads, _ = backward(state.gen_graph, state.gen_params, cache,
                            losses.weighted_l2_grad(pred, pet))
        _adam_step(state.gen_params, grads, state.gen_m, state.gen_v, step, cfg)
        state.step = step
        state.record(step, "loss_fcn", loss)
        if val_data and cfg.eval_every and step % cfg.eval_every == 0:
            vl = _val_loss(losses.weighted_l2_loss,
                           lambda x: forward(state.gen_graph, state.gen_params, x),
                           val_data, cfg)
            state.record(step, "val_loss", vl)
            if vl < best_val - 1e-12:
                best_val, stale = vl, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break


def train_cgan(data, fcn_state: TrainState, cfg: TrainConfig, val_data=None) -> TrainState:
    """Stage 2: adversarial refinement on top of the frozen stage-1 network.

    With ``cfg.joint_finetune`` the FCN also receives the gradient that flows
    through the generator's second input channel; by default it stays frozen
    and ``fcn_state`` is never mutated either way (the state keeps its own
    copy when fine-tuning).
    """
    _check_data(data, cfg)
    if fcn_state.kind != "fcn":
        raise ValueError("train_cgan expects a stage-1 state")
    if fcn_state.gen_graph.input_size != cfg.input_size:
        raise ValueError("stage-1 network input size differs from cfg.input_size")
    gen = build_network("UNetGen", 2, cfg.input_size, cfg.width_scale)
    disc = build_network("Discriminator", 3, cfg.input_size, cfg.width_scale)
    gen_params = init_params(gen, np.random.default_rng([cfg.seed, _STREAM_INIT_GEN]))
    disc_params = init_params(disc, np.random.default_rng([cfg.seed, _STREAM_INIT_DISC]))
    gen_m, gen_v = _zero_moments(gen_params)
    disc_m, disc_v = _zero_moments(disc_params)
    fcn_params = {k: {n: a.copy() for n, a in lv.items()}
                  for k, lv in fcn_state.gen_params.items()}
    state = TrainState(kind="cgan", cfg=cfg, gen_graph=gen, gen_params=gen_params,
                       gen_m=gen_m, gen_v=gen_v, disc_graph=disc,
                       disc_params=disc_params, disc_m=disc_m, disc_v=disc_v,
                       fcn_graph=fcn_state.gen_graph, fcn_params=fcn_params)
    _run_cgan_steps(state, data, val_data, until_step=cfg.max_steps)
    return state


def _run_cgan_steps(state: TrainState, data, val_data, until_step: int) -> None:
    cfg = state.cfg
    _check_data(data, cfg)
    sampler = _Sampler(len(data), cfg.batch_size, cfg.seed)
    if cfg.joint_finetune and state.fcn_m is None:
        state.fcn_m, state.fcn_v = _zero_moments(state.fcn_params)
    best_val, stale = np.inf, 0
    for step in range(state.step + 1, until_step + 1):
        rng = np.random.default_rng([cfg.seed, _STREAM_STEP, step])
        ct, ct_noised, pet = _make_batch(data, sampler.batch(step), cfg, rng,
                                         with_noise=True)
        if cfg.joint_finetune:
            fcn_out, fcn_cache = forward(state.fcn_graph, state.fcn_params, ct,
                                         return_cache=True)
        else:
            fcn_out = forward(state.fcn_graph, state.fcn_params, ct)
        g_in = np.concatenate([ct_noised, fcn_out], axis=3)
        fake, g_cache = forward(state.gen_graph, state.gen_params, g_in,
                                return_cache=True)

        # discriminator step on (fcn, ct, real) vs (fcn, ct, fake)
        d_real_in = np.concatenate([fcn_out, ct, pet], axis=3)
        d_fake_in = np.concatenate([fcn_out, ct, fake], axis=3)
        p_real, dr_cache = forward(state.disc_graph, state.disc_params, d_real_in,
                                   return_cache=True)
        p_fake, df_cache = forward(state.disc_graph, state.disc_params, d_fake_in,
                                   return_cache=True)
        loss_d, _ = losses.adversarial_losses(p_real, p_fake)
        _require_finite(loss_d, "discriminator loss", step)
        g_preal, g_pfake = losses.discriminator_grads(p_real, p_fake)
        grads_r, _ = backward(state.disc_graph, state.disc_params, dr_cache, g_preal)
        grads_f, _ = backward(state.disc_graph, state.disc_params, df_cache, g_pfake)
        for lname in grads_r:
            for key in grads_r[lname]:
                grads_r[lname][key] = grads_r[lname][key] + grads_f[lname][key]
        _adam_step(state.disc_params, grads_r, state.disc_m, state.disc_v, step, cfg)

        # generator step against the updated discriminator
        p_fake2, df2_cache = forward(state.disc_graph, state.disc_params, d_fake_in,
                                     return_cache=True)
        split = losses.split_suv_loss(fake, pet, cfg.suv_threshold)
        _, adv = losses.adversarial_losses(p_real, p_fake2)
        loss_g = adv + cfg.lam * split
        _require_finite(loss_g, "generator loss", step)
        _, d_in_grad = backward(state.disc_graph, state.disc_params, df2_cache,
                                losses.generator_adv_grad(p_fake2))
        dpred = cfg.lam * losses.split_suv_grad(fake, pet, cfg.suv_threshold) \
            + d_in_grad[..., _D_IMG: _D_IMG + 1]
        g_grads, g_in_grad = backward(state.gen_graph, state.gen_params, g_cache, dpred)
        _adam_step(state.gen_params, g_grads, state.gen_m, state.gen_v, step, cfg)
        if cfg.joint_finetune:
            f_grads, _ = backward(state.fcn_graph, state.fcn_params, fcn_cache,
                                  g_in_grad[..., 1:2])
            _adam_step(state.fcn_params, f_grads, state.fcn_m, state.fcn_v, step, cfg)

        state.step = step
        state.record(step, "loss_d", loss_d)
        state.record(step, "loss_g_adv", adv)
        state.record(step, "loss_g_split", split)
        state.record(step, "loss_g", loss_g)
        if val_data and cfg.eval_every and step % cfg.eval_every == 0:
            vl = _val_loss(
                lambda p, t: losses.split_suv_loss(p, t, cfg.suv_threshold),
                lambda x: forward(
                    state.gen_graph, state.gen_params,
                    np.concatenate(
                        [x, forward(state.fcn_graph, state.fcn_params, x)], axis=3)),
                val_data, cfg)
            state.record(step, "val_loss", vl)
            if vl < best_val - 1e-12:
                best_val, stale = vl, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break


def resume_training(state: TrainState, data, extra_steps: int, val_data=None) -> TrainState:
    """Continue a loaded state; the trajectory matches an uninterrupted run."""
    until = state.step + extra_steps
    if state.kind == "fcn":
        _run_fcn_steps(state, data, val_data, until_step=until)
    else:
        _run_cgan_steps(state, data, val_data, until_step=until)
    return state


def synthesize(ct_volume: Volume3D, fcn_state: TrainState,
               cgan_state: TrainState | None = None, chunk: int = 8) -> Volume3D:
    """Per-slice synthesis of a PET-like volume from a normalized CT.

    Runs the stage-1 network alone, or refines its output through the stage-2
    generator when given.  No input noise at inference; the result is clipped
    to [0, 1] and placed on the CT grid.
    """
    if ct_volume.modality is not Modality.NORMALIZED:
        raise ValueError("synthesize expects a NORMALIZED CT volume")
    fcn_graph, fcn_params = fcn_state.gen_graph, fcn_state.gen_params
    if cgan_state is not None and cgan_state.fcn_params is not None:
        fcn_graph, fcn_params = cgan_state.fcn_graph, cgan_state.fcn_params
    nx, ny, nz = ct_volume.dims
    if (nx, ny) != fcn_graph.input_size:
        raise ValueError(f"volume cross-section {(nx, ny)} does not match "
                         f"network input size {fcn_graph.input_size}")
    out = np.empty_like(ct_volume.data)
    for z0 in range(0, nz, chunk):
        zs = range(z0, min(z0 + chunk, nz))
        x = np.stack([ct_volume.data[:, :, z] for z in zs])[..., None]
        pred = forward(fcn_graph, fcn_params, x)
        if cgan_state is not None:
            g_in = np.concatenate([x, pred], axis=3)
            pred = forward(cgan_state.gen_graph, cgan_state.gen_params, g_in)
        pred = np.clip(pred, 0.0, 1.0)
        for j, z in enumerate(zs):
            out[:, :, z] = pred[j, :, :, 0]
    return Volume3D(out, ct_volume.spacing, ct_volume.offset, Modality.NORMALIZED)


# ---------------------------------------------------------------------------
# Checkpoints and history export
# ---------------------------------------------------------------------------

def _graph_meta(g: NetworkGraph | None):
    if g is None:
        return None
    return {"name": g.name, "input_channels": g.input_channels,
            "input_size": list(g.input_size), "width_scale": g.width_scale}


def _pack(arrays: dict, prefix: str, tree: dict | None) -> None:
    if tree is None:
        return
    for lname, lv in tree.items():
        for key, arr in lv.items():
            arrays[f"{prefix}/{lname}/{key}"] = arr


def _unpack(npz, prefix: str, template: dict) -> dict:
    out = {}
    for lname, lv in template.items():
        out[lname] = {}
        for key, arr in lv.items():
            full = f"{prefix}/{lname}/{key}"
            if full not in npz:
                raise CheckpointError(f"checkpoint missing array {full}")
            loaded = npz[full]
            if loaded.shape != arr.shape:
                raise CheckpointError(f"checkpoint array {full} has shape "
                                      f"{loaded.shape}, expected {arr.shape}")
            out[lname][key] = loaded
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Single-file archive of parameters, moments, step, history, and config."""
    meta = {
        "kind": state.kind,
        "step": state.step,
        "cfg": asdict(state.cfg),
        "graphs": {"gen": _graph_meta(state.gen_graph),
                   "disc": _graph_meta(state.disc_graph),
                   "fcn": _graph_meta(state.fcn_graph)},
    }
    arrays: dict[str, np.ndarray] = {}
    _pack(arrays, "params/gen", state.gen_params)
    _pack(arrays, "m/gen", state.gen_m)
    _pack(arrays, "v/gen", state.gen_v)
    _pack(arrays, "params/disc", state.disc_params)
    _pack(arrays, "m/disc", state.disc_m)
    _pack(arrays, "v/disc", state.disc_v)
    _pack(arrays, "params/fcn", state.fcn_params)
    _pack(arrays, "m/fcn", state.fcn_m)
    _pack(arrays, "v/fcn", state.fcn_v)
    if state.history:
        steps, names, values = zip(*state.history)
        arrays["history_step"] = np.asarray(steps, dtype=np.int64)
        arrays["history_name"] = np.asarray(names, dtype=np.str_)
        arrays["history_value"] = np.asarray(values, dtype=np.float64)
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path) -> TrainState:
    try:
        npz = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with npz:
        try:
            meta = json.loads(bytes(npz["meta"]))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint {path} has no valid metadata") from exc
        cfg_d = dict(meta["cfg"])
        cfg_d["input_size"] = tuple(cfg_d["input_size"])
        cfg = TrainConfig(**cfg_d)

        def rebuild(tag):
            gm = meta["graphs"][tag]
            if gm is None:
                return None, None
            g = build_network(gm["name"], gm["input_channels"],
                              tuple(gm["input_size"]), gm["width_scale"])
            template = init_params(g, np.random.default_rng(0))
            return g, template

        gen_graph, gen_t = rebuild("gen")
        disc_graph, disc_t = rebuild("disc")
        fcn_graph, fcn_t = rebuild("fcn")
        state = TrainState(
            kind=meta["kind"], cfg=cfg, gen_graph=gen_graph,
            gen_params=_unpack(npz, "params/gen", gen_t),
            gen_m=_unpack(npz, "m/gen", gen_t),
            gen_v=_unpack(npz, "v/gen", gen_t),
            disc_graph=disc_graph,
            disc_params=_unpack(npz, "params/disc", disc_t) if disc_t else None,
            disc_m=_unpack(npz, "m/disc", disc_t) if disc_t else None,
            disc_v=_unpack(npz, "v/disc", disc_t) if disc_t else None,
            fcn_graph=fcn_graph,
            fcn_params=_unpack(npz, "params/fcn", fcn_t) if fcn_t else None,
            step=int(meta["step"]),
        )
        has_fcn_moments = fcn_t and any(k.startswith("m/fcn/") for k in npz.files)
        if has_fcn_moments:
            state.fcn_m = _unpack(npz, "m/fcn", fcn_t)
            state.fcn_v = _unpack(npz, "v/fcn", fcn_t)
        if "history_step" in npz:
            state.history = list(zip(npz["history_step"].tolist(),
                                     npz["history_name"].tolist(),
                                     npz["history_value"].tolist()))
    return state


def history_to_csv(state: TrainState, path) -> None:
    """Loss history as ``step,loss_name,value`` rows."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,loss_name,value\n")
        for step, name, value in state.history:
            f.write(f"{step},{name},{value!r}\n")
