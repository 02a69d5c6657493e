"""
Synthetic chest phantom gallery
===============================

Generates a small phantom corpus, loads it back through the DICOM codec,
and renders one slice per patient class: an untampered scan, an injected
lesion (FM), and a removed lesion (FB).  The tamper footprint is invisible
at display window settings; the detector works off texture statistics, not
anything a radiologist would see.

Run:  python3 demos/phantom_gallery.py [out.png]
"""

import sys
from pathlib import Path
from tempfile import mkdtemp

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from ctguard.cohort import Label, load_manifest
from ctguard.dicomio import load_volume
from ctguard.phantom import PhantomSpec, write_corpus
from ctguard.preprocess import to_hu

out_path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("phantom_gallery.png")

spec = PhantomSpec(seed=7, n_patients=8, slices_per_patient=3, dims=(272, 288))
root = write_corpus(spec, mkdtemp(prefix="ctguard-demo-"))
manifest = load_manifest(root / "manifest.json")
print(f"corpus at {root}: {len(manifest.entries)} patients")

# pick the first patient of each label
wanted = {Label.UNTAMPERED: None, Label.FM: None, Label.FB: None}
for entry in manifest.entries:
    if wanted[entry.label] is None:
        wanted[entry.label] = entry

fig, axes = plt.subplots(1, 3, figsize=(12, 4.2))
for ax, (label, entry) in zip(axes, wanted.items()):
    volume = load_volume(Path(manifest.root) / entry.directory)
    middle = volume.slices[len(volume.slices) // 2]
    hu = to_hu(middle)
    ax.imshow(hu, cmap="gray", vmin=-1000, vmax=400)
    ax.set_title(f"{entry.patient_id}  {label.value}")
    ax.axis("off")
fig.suptitle("Phantom slices by class (lung window)")
fig.tight_layout()
fig.savefig(out_path, dpi=110)
print(f"wrote {out_path}")
