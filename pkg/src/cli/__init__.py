"""
Command-line package for the BASEN toolkit
Contains the cmd_* functions bound to the subcommands of src/main.py.
"""
