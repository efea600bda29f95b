"""Training-free instruction-guided image editing.

Compose pre-trained models only: caption the input image, prompt a language
model for the after-edit caption, form a weighted edit-direction embedding
from the two caption embeddings, DDIM-invert the input, and regenerate under
the direction-shifted conditioning.
"""

from .adapters import AdapterSet, LlmConfig, build_adapter_set, load_config
from .captions import CaptionPair, CaptionPipeline, PromptTemplate, load_template, render_prompt
from .ddim import DdimEngine, InvertedLatent, NoiseSchedule, ddim_invert_step, ddim_step
from .direction import EditDirection, apply, direction, mean_conditioning
from .editor import EditConfig, EditRequest, EditResult, Editor
from .evaluation import DatasetExample, EvalRecord, bleu4, caption_cosine, clip_i, clip_t

__version__ = "0.1.0"

__all__ = [
    "AdapterSet",
    "CaptionPair",
    "CaptionPipeline",
    "DatasetExample",
    "DdimEngine",
    "EditConfig",
    "EditDirection",
    "EditRequest",
    "EditResult",
    "Editor",
    "EvalRecord",
    "InvertedLatent",
    "LlmConfig",
    "NoiseSchedule",
    "PromptTemplate",
    "apply",
    "bleu4",
    "build_adapter_set",
    "caption_cosine",
    "clip_i",
    "clip_t",
    "ddim_invert_step",
    "ddim_step",
    "direction",
    "load_config",
    "load_template",
    "mean_conditioning",
    "render_prompt",
]
