"""End-to-end speech recognition at desk scale: a convolutional+transformer
speech encoder bridged into a rotary decoder-only language model, trained
jointly (optionally with a CTC branch) on a synthetic tone corpus."""

from .audio import SynthProfile, Waveform, generate_corpus, read_wav, synth_utterance, write_wav
from .config import DecodeConfig, EncoderConfig, LmConfig, LoraConfig, TrainConfig
from .model import AsrModel, CtcModel
from .tensor import Tensor, no_grad
from .tokenizer import Vocab, build_vocab, decode, encode

__all__ = [
    "AsrModel", "CtcModel", "DecodeConfig", "EncoderConfig", "LmConfig",
    "LoraConfig", "SynthProfile", "Tensor", "TrainConfig", "Vocab", "Waveform",
    "build_vocab", "decode", "encode", "generate_corpus", "no_grad",
    "read_wav", "synth_utterance", "write_wav",
]
