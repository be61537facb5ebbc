"""tsrpipe: automated tumor-stroma-ratio estimation for whole-slide images.

The pipeline stages map onto the submodules:

* ``raster``   - PPM codec, grayscale, Otsu thresholding, tissue masks
* ``stain``    - stain-vector estimation and color normalization
* ``annotate`` - annotation JSON, rasterization, patch labeling
* ``tiler``    - overlapping (annotated) and masked (inference) tiling
* ``cohort``   - constrained slide splits, stratified holdout/k-fold,
  nine-class collapsing, manifests
* ``model``    - miniature trainable classifier, external-prediction
  adapter, pretraining setups
* ``scoring``  - TSR, stroma-high/low, metrics suite, reports
* ``synth``    - seed-deterministic synthetic slides with exact ground truth
* ``pipeline`` - slide-level batch driver
* ``cli``      - the ``tsrpipe`` command
"""

__version__ = "0.1.0"

from .annotate import TissueClass  # noqa: F401
from .raster import RgbImage, read_image, write_image  # noqa: F401
from .scoring import SlideScore, score_slide, tsr  # noqa: F401
