"""Two-stage reinforced fine-tuning of a consistency-policy action head:
offline calibrated conservative Q-learning plus consistency behavior cloning,
then online TD learning with human or scripted interventions."""

__version__ = "0.1.0"
