"""tbsim: a differentiable, data-driven multi-agent traffic simulator."""

__version__ = "0.1.0"
