from .base import (EmbeddingBundle, EmbeddingCache, Encoder, EncoderDescriptor, attach_adapter,
                   available_encoders, embed, global_feature, global_feature_t, load_adapter,
                   load_encoder, make_toy_encoder, register_encoder, to_tensor)
from .lora import AdapterSpec, LoRALinear, lora_forward, read_adapter_file, save_adapters

__all__ = [
    "AdapterSpec", "EmbeddingBundle", "EmbeddingCache", "Encoder", "EncoderDescriptor", "LoRALinear",
    "attach_adapter", "available_encoders", "embed", "global_feature", "global_feature_t",
    "load_adapter", "load_encoder", "lora_forward", "make_toy_encoder", "read_adapter_file",
    "register_encoder", "save_adapters", "to_tensor",
]
