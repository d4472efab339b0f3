from .backgrounds import Background, DirectoryBackgrounds, ExternalBackgrounds, ProceduralBackgrounds, generate_backgrounds
from .captions import TOKEN, CaptionCorpus, CaptionEntry, strip_identifier
from .client import ExternalGeneratorClient
from .compositing import PasteParams, cut_and_paste
from .diffusion import NoiseSchedule, dreambooth_loss
from .filtering import filter_pool, masked_crop
from .synthesis import CFG_SWEEP, GeneratorConfig, register_generator, synthesize_pool, unregister_generator

__all__ = [
    "Background", "CFG_SWEEP", "CaptionCorpus", "CaptionEntry", "DirectoryBackgrounds", "ExternalBackgrounds",
    "ExternalGeneratorClient", "GeneratorConfig", "NoiseSchedule", "PasteParams", "ProceduralBackgrounds",
    "TOKEN", "cut_and_paste", "dreambooth_loss", "filter_pool", "generate_backgrounds", "masked_crop",
    "register_generator", "strip_identifier", "synthesize_pool", "unregister_generator",
]
