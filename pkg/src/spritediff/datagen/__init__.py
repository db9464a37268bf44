from .sprites import (
    BACKGROUND, COLOR_VALUES, PERSON_FREQUENCY, RELATIONS, SHAPE_MASKS,
    SpriteObject, SpriteScene, classify, contains_person, detect_person,
    generate_scene, generate_sprites, parse_caption, read_manifest, render,
    write_manifest,
)
from .masks import FULL_MASK_PROB, MASK_KINDS, random_mask
from .gmm_world import make_gmm, symmetric_pair
from .safety import (
    FilterModel, boundary_relabel_round, extract_filter_features, filter_dataset,
    fit_safety_filter, fnr_fpr, three_crops, tune_bias,
)
