from .elo import elo_fit, elo_loss, read_judgments_csv, win_matrix
from .metrics import (
    ShapeClassifier, frechet_distance, inception_score_analog, precision_recall,
    shape_label, train_shape_classifier,
)
from .sweeps import (
    clip_features, evaluate_samples, generate_batch, noised_vs_unnoised_study,
    plot_sweep, read_sweep_csv, sweep_guidance, write_sweep_csv,
)
