"""Language-conditioned multi-agent trajectory prediction."""
