"""Chat template rendering and training-time token encoding.

The rendered string is byte-exact: system, user, and assistant turns each end
with "<|end|>\\n" and the EOS string comes last with nothing after it.
Embedded control tokens in user text pass through unescaped.
"""

from __future__ import annotations

import numpy as np

from .samples import ChatSample
from .tokenizer import EOS_ID, tokenize

SYSTEM_PROMPT = "You are a helpful telecom expert assistant."
DEFAULT_EOS_TOKEN = "<|endoftext|>"
END_MARKER = "<|end|>"


def prompt_prefix(user_input: str) -> str:
    """Everything up to and including the assistant turn opener."""
    return (
        f"<|system|>\n{SYSTEM_PROMPT}{END_MARKER}\n"
        f"<|user|>\n{user_input}{END_MARKER}\n"
        f"<|assistant|>\n"
    )


def apply_chat_template(sample: ChatSample, eos_token: str = DEFAULT_EOS_TOKEN) -> str:
    if not sample.input or not sample.output:
        raise ValueError("input and output must be non-empty")
    return f"{prompt_prefix(sample.input)}{sample.output}{END_MARKER}\n{eos_token}"


def encode_for_training(sample: ChatSample):
    """Token ids plus the response-only loss mask.

    Mask is true exactly on the assistant-content bytes and the trailing EOS;
    template control tokens (including the closing end marker) are excluded.
    """
    prefix_ids = tokenize(prompt_prefix(sample.input))
    output_ids = tokenize(sample.output)
    close_ids = tokenize(f"{END_MARKER}\n")
    ids = prefix_ids + output_ids + close_ids + [EOS_ID]
    mask = (
        [False] * len(prefix_ids)
        + [True] * len(output_ids)
        + [False] * len(close_ids)
        + [True]
    )
    return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=bool)
