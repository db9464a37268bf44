from .text import (
    COLORS, EMPTY, EOS, K_MAX, PAD, SHAPES, UNK, VOCAB,
    CaptionTokens, TextEncoder, detokenize, pack_tokens, tokenize,
)
from .denoiser import (
    DenoiserConfig, SpriteDenoiser, build_base, build_inpaint, build_upsampler,
    timestep_embedding,
)
from .gmm import (
    AnalyticGmmDenoiser, GmmBayesClassifier, GmmSpec, eps_star, log_density, score,
)
