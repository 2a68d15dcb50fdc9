"""Video clip embedding exporter writing DARC1 files."""

from .backbone import Backbone, available_backbones, load_backbone
from .clips import ClipSpec
from .darc_writer import write_darc1
from .export import ManifestRow, export, read_manifest

__version__ = "0.1.0"
