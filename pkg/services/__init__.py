"""
Services package for the crowd-adapt toolkit: data, density maps, networks,
losses, training, evaluation and reporting.
"""
