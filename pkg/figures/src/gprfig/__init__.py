"""Publication-style figures from exported GPR inversion bundles.

This package consumes only the bundle directory that the inversion
workbench exports (an ``index.txt``, loss/metrics CSVs, and GPRT image
tensors); it never imports the workbench itself.

- ``bundle``:       the bundle/index/GPRT readers,
- ``loss_curves``:  training/testing loss-curve figure,
- ``panels``:       sample-by-role B-scan and permittivity panel grids.
"""
