"""Cross-viewpoint latent action models on a synthetic multi-view world."""
