"""Rebuild probe.png and its golden embedding.

Run only after an intentional change to the toy backbone:
``python3 tests/data/regenerate.py``.
"""

from pathlib import Path

import numpy as np
import torch

from cosal.data import Image, read_rgb, write_rgb
from cosal.encoder import BackboneSpec, build_backbone, extract_features, freeze
from cosal.synthdata import SynthSpec, render_scene

HERE = Path(__file__).parent


def main():
    torch.set_num_threads(1)
    scene = render_scene(SynthSpec.desk(), target=2, n_distractors=1, seed=2024)
    write_rgb(HERE / "probe.png", scene.pixels)
    net = freeze(build_backbone(BackboneSpec(), seed=0))
    emb = extract_features(Image(read_rgb(HERE / "probe.png")), net).embedding.double().numpy()
    np.save(HERE / "probe_embedding.npy", emb)
    print(emb)


if __name__ == "__main__":
    main()
