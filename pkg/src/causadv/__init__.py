"""CausAdv: counterfactual-information analysis of a CNN's last conv layer
for adversarial example detection, with attack generation and causal
heatmap explanations."""

__version__ = "0.1.0"
