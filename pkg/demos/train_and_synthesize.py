"""
Training the synthesis network and generating a virtual PET
===========================================================

Overfits the stage-1 network on the axial slices of a single phantom scan,
then synthesizes a PET volume from the CT alone and compares it against
the reference.  A short adversarial refinement pass (stage 2) follows.

Expect roughly a minute of CPU time at the reduced width used here.
Writes the loss curve and a prediction figure to demo_output/.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from petsynth.dataprep import extract_slices, prepare_pair
from petsynth.evaluate import evaluate_pair, to_suv
from petsynth.phantom import PhantomConfig, generate_phantom_pair
from petsynth.training import TrainConfig, synthesize, train_cgan, train_fcn
from petsynth.volume import Modality, Volume3D

out_dir = Path(__file__).parent / "demo_output"
out_dir.mkdir(exist_ok=True)

# ---------------------------------------------------------------------------
# Data: the central 8 slices of one phantom, aligned and normalized.
# ---------------------------------------------------------------------------
ct_raw, pet_raw, _ = generate_phantom_pair(PhantomConfig(seed=0))
pair = prepare_pair(ct_raw, pet_raw, slice_range=(4, 11))
slices = extract_slices(pair)
print(f"training on {len(slices)} slices of {slices[0][0].shape}")

# ---------------------------------------------------------------------------
# Stage 1: the fully convolutional network with the uptake-weighted L2 loss.
# width_scale 0.25 shrinks every channel count to a quarter for CPU speed.
# ---------------------------------------------------------------------------
base = dict(width_scale=0.25, input_size=(64, 64), augment=False, seed=0)
fcn_state = train_fcn(slices, TrainConfig(max_steps=300, **base))
loss = [v for _, name, v in fcn_state.history if name == "loss_fcn"]
print(f"stage 1: loss {loss[0]:.2e} -> {loss[-1]:.2e} over {len(loss)} steps")

# ---------------------------------------------------------------------------
# Stage 2: adversarial refinement.  The generator conditions on the CT and
# the stage-1 output; the split reconstruction loss keeps it anchored.  A
# pass this short only demonstrates the mechanics: the fresh generator needs
# a few thousand steps before its reconstruction error matches stage 1.
# ---------------------------------------------------------------------------
cgan_state = train_cgan(slices, fcn_state, TrainConfig(max_steps=200, **base))
loss_g = [v for _, name, v in cgan_state.history if name == "loss_g"]
print(f"stage 2: generator objective {loss_g[0]:.3f} -> {loss_g[-1]:.3f}")

# ---------------------------------------------------------------------------
# Synthesis and scoring.  Metrics are split by the reference's SUV regions:
# above / below the malignancy threshold.
# ---------------------------------------------------------------------------
ct_vol = Volume3D(np.stack([s[0] for s in slices], axis=2), (1, 1, 4),
                  (0, 0, 0), Modality.NORMALIZED)
ref = Volume3D(np.stack([s[1] for s in slices], axis=2), (1, 1, 4),
               (0, 0, 0), Modality.NORMALIZED)
for label, state in (("fcn only", None), ("refined", cgan_state)):
    syn = synthesize(ct_vol, fcn_state, state)
    m = evaluate_pair(syn, ref)
    print(f"{label:>9}: MAE high {m.mae_high:.3f}  low {m.mae_low:.3f}  "
          f"avg {m.mae_avg:.3f} SUV")

# ---------------------------------------------------------------------------
# Figures: training curve and a mid-stack slice comparison.
# ---------------------------------------------------------------------------
fig, ax = plt.subplots(figsize=(6, 3.5))
ax.semilogy(loss)
ax.set_xlabel("step")
ax.set_ylabel("weighted L2 loss")
ax.grid(True, alpha=0.3)
fig.tight_layout()
fig.savefig(out_dir / "training_loss.png", dpi=110)

syn = synthesize(ct_vol, fcn_state, cgan_state)
z = 4
panels = [("CT input", ct_vol.data[:, :, z], "gray"),
          ("reference PET", to_suv(ref).data[:, :, z], "hot"),
          ("virtual PET", to_suv(syn).data[:, :, z], "hot")]
fig, axes = plt.subplots(1, 3, figsize=(12, 4))
for ax, (title, img, cmap) in zip(axes, panels):
    ax.imshow(img.T, cmap=cmap)
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out_dir / "virtual_pet.png", dpi=110)
print(f"figures written to {out_dir}")
