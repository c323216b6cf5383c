"""gprinv: a ground-penetrating-radar inversion workbench.

The package covers the full loop from synthetic subsurface scenes to
reconstructed permittivity maps:

- ``scene``     heterogeneous soil models (fractal water-fraction fields,
                Peplinski dielectric mixing) and buried-object geometry
- ``fdtd``      2D TMz finite-difference time-domain solver with CPML
                absorbing boundaries; A-scan / B-scan acquisition
- ``dataset``   B-scan post-processing (clutter removal, normalization,
                resizing) and on-disk training-set construction
- ``autodiff``  a small reverse-mode automatic-differentiation engine over
                4D tensors (the only compute backend used for learning)
- ``dmrf``      multi-receptive-field U-Nets and the two-stage
                denoise-then-invert model, with training and inference
- ``metrics``   image-comparison metrics (SSIM, MSE, MAE, MRE)
- ``fwi``       a simulated-annealing full-waveform-inversion baseline
- ``config``    profile/override resolution shared by all entry points
- ``cli``       command-line entry points tying the above together
- ``errors``    the package exception hierarchy
"""

__version__ = "0.1.0"
