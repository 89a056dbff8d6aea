"""Offset-detector dental CBCT simulation and two-stage beam-hardening
artifact reduction: sinogram reflection, data-consistency-driven sinogram
correction, FDK reconstruction, and a file-boundary hook for a learned
slice denoiser."""

from .core import (ScanGeometry, Sinogram, Volume, blend_weight,
                   conjugate_angle, desk_geometry, full_scale_geometry,
                   load_sinogram, load_volume, save_sinogram, save_volume,
                   subsample_offset, wrap_angle)
from .dcc import (ConsistencyConfig, CorrectorParams, FitResult,
                  choose_lambda_threshold, choose_y0, consistency_cost,
                  consistency_transform, corrector_apply, fit_params, h_eval)
from .metrics import nrmsd, roi_cylinder_mask, ssim, ssim_volume
from .projector import (ExtrapolationSpec, FilterSpec, GridSpec,
                        extrapolate_truncation, fan_reconstruct,
                        fdk_reconstruct, forward_project)
from .reflect import reflect_fill
from .simulate import (EnergySpectrum, MaterialTable, NoiseConfig,
                       PhantomSpec, add_noise, bundled_noise, bundled_phantom,
                       default_spectrum, polychromatic_project,
                       rasterize_phantom, reference_sinogram)

__version__ = "0.1.0"
