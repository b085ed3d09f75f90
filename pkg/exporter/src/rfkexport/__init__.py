"""Offline exporter of multi-scale CNN feature maps.

Runs images through the conv4 stage of a ResNet-50 (ImageNet- or
MoCo-pretrained weights, loaded from a local file) at several scales and
writes one RFKFEAT1 file per scale.  The files are the only interface to
the alignment pipeline; nothing here imports it.
"""

from .export import export_image, export_path
from .weights import resolve_weights_path, save_random_weights

__version__ = "0.1.0"
