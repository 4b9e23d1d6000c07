"""Realized SNR of 4% noise across the generated signal classes."""
import numpy as np

from ecgipf.experiments import circumferential_fibres, simulate, sphere_setup
from ecgipf.mesh import Anisotropic, Slab
from ecgipf.synth import TruthSpec, add_noise

block = Slab((0, 0, 1), 22.0, 3.0, (((1, 0, 0), 2.0),))
classes = {
    "single": (TruthSpec([(17, 0.0)]), 1.0),
    "two-site": (TruthSpec([(17, 0.0), (146, 20.0)]), 1.0),
    "anisotropic": (TruthSpec([(17, 0.0)]), Anisotropic(circumferential_fibres(), 3.0, 0.3)),
    "block": (TruthSpec([(25, 0.0)], block_regions=[(block, 0.01)]), 1.0),
}

setup = sphere_setup()
for name, (spec, cond) in classes.items():
    y = simulate(setup, spec, cond).observations
    snr = [add_noise(y, 0.04, np.random.default_rng(s)).noise["snr_db"] for s in range(20)]
    crest = np.sqrt(np.mean(y.values ** 2)) / np.mean(np.abs(y.values))
    print(f"{name:12s} snr {np.mean(snr):6.2f} dB  rms/mean|y| {crest:.3f}")
