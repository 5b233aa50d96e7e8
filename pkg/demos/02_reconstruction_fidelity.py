"""
How much does the tokenizer lose?
=================================

Decode the tokens slice by slice along each axis and average the three
reconstructions.  With the pixel-unshuffle backend nothing is lost; a small
convolutional autoencoder fitted for a few seconds loses a fair amount.
"""
import numpy as np
import torch

from tablet import LosslessAutoencoder, SynthSpec, TinyConvAutoencoder, synthesize_scan
from tablet.analysis.recon import block_parcellation, recon_report, reconstruct_axes, psnr
from tablet.autoencoder import fit_autoencoder

vol, _ = synthesize_scan(SynthSpec(T_total=4, seed=1, grid=(40, 40, 40)))

exact = recon_report(vol, LosslessAutoencoder(), block_parcellation(vol.data.shape[1:]))
print("lossless  PSNR", exact.psnr, "SSIM", exact.ssim, "FC", exact.fc_frobenius)

frame = torch.from_numpy(vol.data[0])
slices = torch.cat([frame.movedim(a, 0)[::2] for a in range(3)]).unsqueeze(1).expand(-1, 3, -1, -1).contiguous()
torch.manual_seed(0)
ae = TinyConvAutoencoder(32, hidden=32)
fit_autoencoder(ae, slices, steps=150, lr=5e-3, batch_size=16, seed=0)
ae.eval()

per_axis = reconstruct_axes(vol.data[0], ae)
for name, rec in per_axis.items():
    print(f"{name:>6} only  PSNR {psnr(vol.data[0], rec.numpy()):.2f}")
avg = np.mean([r.numpy() for r in per_axis.values()], axis=0)
print(f"3-axis avg   PSNR {psnr(vol.data[0], avg):.2f}")

rep = recon_report(vol, ae, block_parcellation(vol.data.shape[1:]))
print(f"tiny AE scan PSNR {rep.psnr:.2f}  SSIM {rep.ssim:.3f}  FC-Frobenius {rep.fc_frobenius:.3f}")
