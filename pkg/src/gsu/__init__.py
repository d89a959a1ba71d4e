"""Graph scene understanding pipeline: vectorized traffic-scene encoding,
potential-field pre-train supervision, masked-roadmap pre-training, and
fine-tuned trajectory/intention heads, all at desk scale."""

__version__ = "0.1.0"
