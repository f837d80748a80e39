"""Cylindrical-voxel LiDAR segmentation toolkit.

Pure-numpy implementation of a cylindrical partition pipeline for outdoor
point cloud segmentation: KITTI-style scan I/O, cylindrical/cubic voxel
grids, submanifold sparse 3D convolutions with hand-written backward passes,
an asymmetrical residual encoder-decoder with per-point refinement, weighted
cross-entropy plus Lovasz-softmax training, and a small CLI.
"""

__version__ = "0.1.0"

from .pointcloud import (
    FileFormatError,
    LabelMap,
    PointCloud,
    SyntheticSceneSpec,
    generate_synthetic_scene,
    read_kitti_bin,
    read_kitti_labels,
    write_kitti_bin,
    write_kitti_labels,
)
from .partition import (
    CubicGridSpec,
    CylGridSpec,
    VoxelMapping,
    assign_cells,
    cart_to_cyl,
    cyl_to_cart,
    encode_cell_labels,
    encoding_upper_bound_miou,
    occupancy_by_distance,
    scatter_features,
)
from .sparse import (
    ConvParams,
    KernelSpec,
    NormParams,
    Rulebook,
    SparseTensor,
    build_rulebook,
    dense_conv_oracle,
    densify,
    inverse_conv_forward,
    sparse_conv_forward,
    sparsify,
)
from .network import NetworkConfig, SegmentationNetwork, point_input_features
from .metrics import ConfusionMatrix, compute_miou
