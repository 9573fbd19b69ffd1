"""gradekit: desk-scale QLoRA fine-tuning and automated response scoring."""

__version__ = "0.1.0"
