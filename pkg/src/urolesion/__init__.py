"""Two-step transfer learning for lesion classification in urinary-tract endoscopy."""

__version__ = "0.1.0"
