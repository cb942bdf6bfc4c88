"""Deep Wishart process models, inference and verification."""
