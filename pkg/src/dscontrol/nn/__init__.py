"""From-scratch neural networks: layers, models, training and ensembles."""
