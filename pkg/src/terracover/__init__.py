"""Land-cover classification and segmentation toolkit.

CORINE label algebra, raster tiling, dataset manifests, multi-label and
segmentation metrics, a small numpy U-Net with encoder transfer, and
loss-ranked label auditing.
"""

__version__ = "0.1.0"
