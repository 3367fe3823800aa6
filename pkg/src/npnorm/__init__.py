"""Deep normative modeling with neural processes."""
