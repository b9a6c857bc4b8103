from .client import (
    HTTPChatClient, LLMClientSpec, LLMRequest, MockLLMClient, UnreachableClient, call_with_retries,
)
from .pipeline import (
    REJECT_REASONS, Accept, DescriptionSet, EnhanceConfig, EnhancedStory, RawStory, Reject,
    RetentionStats, Template, TranscriptCache, describe_image, read_raw_stories,
    render_rewrite_prompt, rewrite_story, run_enhancement, split_paragraphs, validate_candidate,
)
