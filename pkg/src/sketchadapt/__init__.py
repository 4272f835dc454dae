"""sketchadapt: meta-trained sketch-based image retrieval with test-time adaptation.

The package is organized by stage of the pipeline:

- ``strokes``   stroke-5 sketch representation, rasterization, edgemaps
- ``synth``     synthetic sketch/photo dataset with category and style shift
- ``dataio``    newline-delimited dataset files and the category split
- ``nets``      encoder, projection head, sequence/edgemap decoders, stroke-weight net
- ``losses``    triplet and reconstruction objectives
- ``episodes``  meta-task sampling with pooled hard negatives
- ``metatrain`` bilevel training loop (inner adaptation, higher-order outer update)
- ``ttt``       inference-time adaptation and retrieval
- ``metrics``   mAP@all and precision@K
- ``config``    experiment configuration, seeding, fingerprints
- ``cli``       `sketchadapt` command-line entry point
"""

from sketchadapt.errors import (
    CheckpointError,
    ConfigError,
    InvalidSketch,
    NumericalError,
    ParseError,
    SamplingError,
    ShapeError,
    SketchAdaptError,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "InvalidSketch",
    "NumericalError",
    "ParseError",
    "SamplingError",
    "ShapeError",
    "SketchAdaptError",
]

__version__ = "0.1.0"
