"""Cross-domain recommendation with text-anchored domain adaptation."""
