"""Point-cloud and image collaboration for place recognition, at desk scale."""

from .aggregation import VladParams, att_vlad, net_vlad, soft_assign, spatial_attention
from .backbones import MlpParams, image_backbone, point_backbone
from .daynight import WorldSpec, generate_world, histogram_normalize, night_corrupt
from .fusion import (ChannelGateParams, Model, PipelineConfig, concat, forward_pipeline,
                     global_channel_attention, init_model, local_channel_attention)
from .retrieval import (DescriptorDatabase, RecallReport, build_database, evaluate, is_success,
                        query_topk)
from .scenes import (Scene, SceneDatabase, downsample, normalize_cloud, pair_by_timestamp,
                     split_by_spacing)
from .training import TrainParams, gradcheck, lazy_quadruplet_loss, mine_tuples, train

__version__ = "0.1.0"
