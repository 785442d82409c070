from placerec.encoders.bev import BevConfig, PointCloudEncoder, encode_pointcloud, voxelize_bev
from placerec.encoders.cnn import (
    CnnEncoder,
    CnnEncoderConfig,
    encode_image,
    encode_semantic_mask,
    image_to_input,
    mask_to_input,
)
from placerec.encoders.external import load_external_embeddings, save_embeddings
from placerec.encoders.text import (
    PcaModel,
    TextEncoder,
    TfidfModel,
    encode_text,
    fit_pca,
    fit_tfidf,
    load_pca,
    load_tfidf,
    project_pca,
    save_pca,
    save_tfidf,
    tfidf_matrix,
    tokenize,
    transform_tfidf,
)

__all__ = [
    "BevConfig", "CnnEncoder", "CnnEncoderConfig", "PcaModel", "PointCloudEncoder", "TextEncoder",
    "TfidfModel", "encode_image", "encode_pointcloud", "encode_semantic_mask", "encode_text",
    "fit_pca", "fit_tfidf", "image_to_input", "load_external_embeddings", "load_pca", "load_tfidf",
    "mask_to_input", "project_pca", "save_embeddings", "save_pca", "save_tfidf", "tfidf_matrix",
    "tokenize", "transform_tfidf", "voxelize_bev",
]
