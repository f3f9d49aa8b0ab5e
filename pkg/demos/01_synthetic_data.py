"""Generate a small synthetic wound set and look at what is inside it.

Source-domain images are reddish ellipses on skin tones; the target domain
shifts the palette and the outline noise so that transfer has something to do.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from pucare.data_io import SyntheticSpec, generate_synthetic, load_dataset, save_dataset

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "synthetic"

for domain in ("source", "target"):
    ds = generate_synthetic(SyntheticSpec(n=6, domain=domain, size=64, seed=1))
    fg = np.mean([s.mask.mean() for s in ds])
    red = np.mean([s.image[s.mask == 1][:, 0].mean() - s.image[s.mask == 0][:, 0].mean() for s in ds])
    print(f"{domain:6s}: {len(ds)} samples, mean wound fraction {fg:.3f}, wound/skin red gap {red:+.3f}")
    save_dataset(ds, out / domain)

back = load_dataset(out / "source")
print(f"wrote {out}; reloaded ids {back.ids[:3]} ...")
