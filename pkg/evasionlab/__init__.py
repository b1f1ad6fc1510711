######################################################################
# Copyright 2016, 2022 John J. Rofrano. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
######################################################################

"""
Package: evasionlab

Adversarial malware testbed: PE parsing and rewriting, hashed features,
tree ensemble detectors, a feature GAN, a mutation environment and an
evolution strategy agent. This module creates the Flask app that hosts the
sample catalog API and the command line, sets up logging and the catalog
database.
"""
import os
import sys
from flask import Flask
from evasionlab import config
from evasionlab.common import log_handlers

# NOTE: Do not change the order of this code
# The Flask app must be created
# BEFORE you import modules that depend on it !!!

app = Flask(__name__)  # pylint: disable=invalid-name

app.config.from_object(config)

# Dependencies require we import the routes AFTER the Flask app is created
# pylint: disable=wrong-import-position, wrong-import-order, cyclic-import
from evasionlab import routes, models        # noqa: F401, E402
from evasionlab.common import error_handlers, cli_commands  # noqa: F401, E402

log_handlers.init_logging(app, "gunicorn.error", config.LOGGING_LEVEL)

app.logger.info(70 * "*")
app.logger.info("  E V A S I O N   L A B   R U N N I N G  ".center(70, "*"))
app.logger.info(70 * "*")

try:
    os.makedirs(config.WORKSPACE, exist_ok=True)
    models.init_db(app)
except Exception as error:  # pylint: disable=broad-except
    app.logger.critical("%s: Cannot continue", error)
    # gunicorn requires exit code 4 to stop spawning workers when they die
    sys.exit(4)

app.logger.info("Catalog initialized!")
