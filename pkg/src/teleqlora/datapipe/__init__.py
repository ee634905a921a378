"""Dataset pipeline: RFC ingestion, categorization, chat templating,
byte-level tokenization, and stratified splitting."""

from .rfc import (
    FetchError,
    ParseError,
    RfcDocument,
    RfcSection,
    SourceConfig,
    fetch_rfc,
    parse_rfc,
    render_back,
)
from .samples import ChatSample, build_samples, load_samples, save_samples
from .split import split_stratified
from .taxonomy import (
    PromptRuleSet,
    UseCaseCategory,
    categorize,
    default_taxonomy,
    load_rules_config,
)
from .template import (
    DEFAULT_EOS_TOKEN,
    END_MARKER,
    SYSTEM_PROMPT,
    apply_chat_template,
    encode_for_training,
    prompt_prefix,
)
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, UNK_ID, VOCAB_SIZE, detokenize, tokenize
