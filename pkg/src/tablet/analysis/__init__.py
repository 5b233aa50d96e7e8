from .attribution import (AttributionMap, attribute_frame, average_attribution, completeness_residual,
                          integrated_gradients, select_confident)
from .profiler import PeakMemory, ProfileRecord, plot_profile, profile
from .recon import (ReconReport, block_parcellation, fc_frobenius, psnr, recon_report,
                    reconstruct_three_axis_average, ssim)
