"""
Backend package for the BASEN toolkit
Contains the signal front-end, corpus, models, channel selection, training and
evaluation functionality.
"""
