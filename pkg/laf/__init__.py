"""
Layer-aggregation fake-image detection toolkit.

Modules: synthetic_faces (datasets), face_preprocessor (crop + alignment),
desknet (tapped backbone), aggregation_model (primitive projections + linear
head), model_trainer / checkpoint_manager (training), ap_evaluator /
benchmark_tables (AP, CoV^-1, cross matrices), layer_analysis / score_cam
(importance, trimming, heatmaps) and cli.
"""

__version__ = "1.0.0"
