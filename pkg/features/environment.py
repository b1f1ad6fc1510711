"""
Environment for Behave Testing

Scenarios run in process: the catalog API through the Flask test client
and the harness commands through the Flask CLI runner, each scenario in a
fresh temporary workspace.
"""
import logging
import tempfile
from os import getenv
from evasionlab import app
from evasionlab.models import CorpusSample, db, init_db

LOG_LEVEL = getenv("LOG_LEVEL", "CRITICAL").upper()


def before_all(context):
    """ Executed once before all tests """
    app.config["TESTING"] = True
    app.logger.setLevel(getattr(logging, LOG_LEVEL, logging.CRITICAL))
    init_db(app)
    context.app = app
    context.config.setup_logging()


def before_scenario(context, scenario):  # pylint: disable=unused-argument
    """ Executed before every scenario """
    context.client = app.test_client()
    context.runner = app.test_cli_runner()
    context.folder = tempfile.TemporaryDirectory()  # pylint: disable=consider-using-with
    context.workspace = context.folder.name
    db.session.query(CorpusSample).delete()
    db.session.commit()


def after_scenario(context, scenario):  # pylint: disable=unused-argument
    """ Executed after every scenario """
    context.folder.cleanup()
    db.session.remove()


def after_all(context):  # pylint: disable=unused-argument
    """ Executed after all tests """
    db.session.close()
