"""
Utility package

Logging, error handlers, CLI commands, status codes and seed derivation
shared by the catalog service and the command line
"""
from .log_handlers import init_logging

__all__ = ('init_logging',)
