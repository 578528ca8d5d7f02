from fpconv.data.augment import augment
from fpconv.data.dataset import (
    Dataset,
    check_labels,
    load_dataset,
    make_room_dataset,
    make_shape_dataset,
    shape_features,
    write_dataset,
)
from fpconv.data.io import Manifest, load_cloud, load_manifest, save_cloud, save_manifest
from fpconv.data.sampling import BlockSample, sample_block, tile_blocks, tile_scene
from fpconv.data.scenes import CLASS_NAMES, SceneSpec, generate_rooms, generate_scene
from fpconv.data.shapes import SHAPE_NAMES, generate_shape_dataset

__all__ = [
    "augment",
    "BlockSample",
    "CLASS_NAMES",
    "Dataset",
    "Manifest",
    "SHAPE_NAMES",
    "SceneSpec",
    "check_labels",
    "generate_rooms",
    "generate_scene",
    "generate_shape_dataset",
    "load_cloud",
    "load_dataset",
    "load_manifest",
    "make_room_dataset",
    "make_shape_dataset",
    "sample_block",
    "save_cloud",
    "save_manifest",
    "shape_features",
    "tile_blocks",
    "tile_scene",
    "write_dataset",
]
