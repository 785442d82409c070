from placerec.synthdata.storage import (
    export_dataset,
    load_cloud,
    load_raster,
    load_real_dataset,
    save_cloud,
    save_raster,
)
from placerec.synthdata.world import (
    Dataset,
    NoiseConfig,
    PlaceSample,
    WorldConfig,
    generate_world,
    render_sample,
    split_database_queries,
    with_noise,
)

__all__ = [
    "Dataset", "NoiseConfig", "PlaceSample", "WorldConfig", "export_dataset", "generate_world", "load_cloud",
    "load_raster", "load_real_dataset", "render_sample", "save_cloud", "save_raster", "split_database_queries",
    "with_noise",
]
