from .layers import (FullyMaskedError, MultiHeadAttention, TransformerConfig,
                     attention, attention_with_weights, causal_mask,
                     positional_encoding)
from .models import BiModalTransformer, VanillaTransformer
from .training import (CaptionExample, CaptionTrainHyper, CaptionerModel,
                       greedy_decode, label_smoothed_kl, load_captioner,
                       save_captioner, teacher_forced_accuracy,
                       train_captioner)
from .vocab import BOS, EOS, PAD, UNK, Vocabulary, tokenize

__all__ = [
    "FullyMaskedError", "MultiHeadAttention", "TransformerConfig",
    "attention", "attention_with_weights", "causal_mask", "positional_encoding",
    "BiModalTransformer", "VanillaTransformer",
    "CaptionExample", "CaptionTrainHyper", "CaptionerModel",
    "greedy_decode", "label_smoothed_kl", "load_captioner", "save_captioner",
    "teacher_forced_accuracy", "train_captioner",
    "BOS", "EOS", "PAD", "UNK", "Vocabulary", "tokenize",
]
