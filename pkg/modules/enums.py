from enum import StrEnum


class Stage(StrEnum):
    CE = "ce"
    SCST = "scst"
    GRPO = "grpo"
    EVAL = "eval"
    GEN_DATA = "gen-data"
    SCORE = "score"


class PolicyRole(StrEnum):
    OLD = "old"
    REFERENCE = "reference"


class RatioAgg(StrEnum):
    SEQUENCE = "sequence"
    TOKEN_MEAN = "token_mean"


class UpdateMode(StrEnum):
    # Sync pi_old to pi_theta every `update_steps` optimizer steps.
    SYNC = "sync"
    # Run `update_steps` gradient updates on each sampled batch, then sync.
    INNER = "inner"


class CiderVariant(StrEnum):
    PLAIN = "plain"
    CIDER_D = "cider_d"


class MetricName(StrEnum):
    BLEU1 = "BLEU-1"
    BLEU2 = "BLEU-2"
    BLEU3 = "BLEU-3"
    BLEU4 = "BLEU-4"
    METEOR = "METEOR"
    ROUGE_L = "ROUGE-L"
    CIDER = "CIDEr"
