"""Map-based relocalization against a prebuilt keyframe database."""

from .database import MapDatabase, MapKeyframe
from .features import BINARY, REAL, FeatureSet, distance_matrix, hamming_matrix, read_features, write_features
from .matching import match_features
from .pnp import PnPResult, p3p, pnp_ransac, refine_pose, reprojection_errors
from .relocalize import RelocConfig, Relocalizer, RelocResult, relocalize
from .retrieval import SpatialBowVector, bow_similarity, retrieve_candidates, spatial_bow, spatial_similarity
from .vocabulary import Vocabulary, build_vocabulary, load_vocabulary, save_vocabulary
