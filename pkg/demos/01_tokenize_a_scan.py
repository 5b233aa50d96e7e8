"""
Tokenizing a synthetic scan
===========================

A 4D scan is preprocessed to 96^3 frames, every frame is cut into 2D
slices along all three axes, each slice is squeezed by a 2D autoencoder
and the latents are folded into 27 tokens of width 3072.
"""
import torch

from tablet import SynthSpec, TinyConvAutoencoder, synthesize_scan, tokenize_sequence
from tablet.tokenizer import regroup_scheme

vol, target = synthesize_scan(SynthSpec(T_total=3, seed=0, grid=(48, 48, 48)))
print("scan", vol.scan_id, "frames", vol.data.shape, "label", target.raw_value)

torch.manual_seed(0)
ae = TinyConvAutoencoder(latent_channels=32).eval()
seq = tokenize_sequence(vol, ae)
print("tokens", seq.data.shape)  # (3, 27, 3072)

# the coarser aggregation schemes are pure rearrangements of the same numbers
grid = torch.from_numpy(seq.data[0]).reshape(3, 3, 3, -1)
for scheme in ("9x9216", "3x27648"):
    print(scheme, tuple(regroup_scheme(grid, scheme).shape))
