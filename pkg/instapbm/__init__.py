""" InstaPBM desk-scale lab: a small reverse-mode autodiff engine, MLP
    models, the predictive behavior matching objectives, synthetic domain
    pairs and the realistic domain shift benchmarks.
"""
__version__ = '0.1.0'
