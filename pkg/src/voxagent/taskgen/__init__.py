from .augment import AugmentConfig, affine_warp, augment, lateral_flip
from .grammar import Grammar, GrammarError, GrammarRecursionError, default_grammar, expand_prompt, membership_pattern
from .lesion import (
    INTENSITY_CLASSES,
    Lesion,
    LesionPlacementError,
    LesionSpec,
    classify_contrast,
    regrow,
    shell_contrast,
    shell_mask,
    synth_lesion,
)
from .phantom import Phantom, PhantomSpec, PhantomSpecError, Structure, make_phantom, random_phantom_spec, synth_phantom
from .shard import read_shard, write_shard
from .tasks import TASK_KINDS, TaskConfig, TaskInstance, build_task, make_task, oracle_answer, oracle_run, task_corpus

__all__ = [
    "INTENSITY_CLASSES",
    "TASK_KINDS",
    "AugmentConfig",
    "Grammar",
    "GrammarError",
    "GrammarRecursionError",
    "Lesion",
    "LesionPlacementError",
    "LesionSpec",
    "Phantom",
    "PhantomSpec",
    "PhantomSpecError",
    "Structure",
    "TaskConfig",
    "TaskInstance",
    "affine_warp",
    "augment",
    "build_task",
    "classify_contrast",
    "default_grammar",
    "expand_prompt",
    "lateral_flip",
    "make_phantom",
    "make_task",
    "membership_pattern",
    "oracle_answer",
    "oracle_run",
    "random_phantom_spec",
    "read_shard",
    "regrow",
    "shell_contrast",
    "shell_mask",
    "synth_lesion",
    "synth_phantom",
    "task_corpus",
    "write_shard",
]
