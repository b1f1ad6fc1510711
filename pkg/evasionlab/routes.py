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
Sample Catalog Service

A small JSON API over the ingested corpus plus PE validation and feature
extraction of posted bytes.
"""
from flask import jsonify, request, abort
from evasionlab.models import CorpusSample, LABELS
from evasionlab.common import status  # HTTP Status Codes
from evasionlab.featurizer import Space, extract_features, feature_layout_digest
from evasionlab.pe_core import parse_pe, validate_pe
from . import app, config


######################################################################
# H E A L T H   C H E C K
######################################################################
@app.route("/health")
def healthcheck():
    """Let them know our heart is still beating"""
    return jsonify(status=200, message="OK"), status.HTTP_200_OK


######################################################################
# H O M E   P A G E
######################################################################
@app.route("/")
def index():
    """Base URL for our service"""
    return (
        jsonify(
            name="Evasion Lab Sample Catalog",
            version=config.TOOL_VERSION,
            layout_digest=feature_layout_digest(),
            paths=["/health", "/samples", "/validate", "/features"],
        ),
        status.HTTP_200_OK,
    )


######################################################################
#  U T I L I T Y   F U N C T I O N S
######################################################################
def check_content_type(content_type):
    """Checks that the media type is correct"""
    if "Content-Type" not in request.headers:
        app.logger.error("No Content-Type specified.")
        abort(
            status.HTTP_415_UNSUPPORTED_MEDIA_TYPE,
            f"Content-Type must be {content_type}",
        )

    if request.headers["Content-Type"] == content_type:
        return

    app.logger.error("Invalid Content-Type: %s", request.headers["Content-Type"])
    abort(
        status.HTTP_415_UNSUPPORTED_MEDIA_TYPE,
        f"Content-Type must be {content_type}",
    )


def posted_image():
    """Parses the posted PE bytes; PeFormatError becomes a 400"""
    check_content_type("application/octet-stream")
    data = request.get_data()
    if not data:
        abort(status.HTTP_400_BAD_REQUEST, "Request body is empty")
    return parse_pe(data)


######################################################################
# L I S T   S A M P L E S
######################################################################
@app.route("/samples", methods=["GET"])
def list_samples():
    """Returns the catalog, optionally filtered by label"""
    app.logger.info("Request to list samples...")
    label = request.args.get("label")
    if label:
        if label not in LABELS:
            abort(status.HTTP_400_BAD_REQUEST, f"label must be one of {', '.join(LABELS)}")
        samples = CorpusSample.find_by_label(label)
    else:
        samples = CorpusSample.all()

    results = [sample.serialize() for sample in samples]
    app.logger.info("[%s] samples returned", len(results))
    return jsonify(results), status.HTTP_200_OK


######################################################################
# R E A D   A   S A M P L E
######################################################################
@app.route("/samples/<digest>", methods=["GET"])
def read_sample(digest):
    """Reads a sample by digest or sample id"""
    app.logger.info("Request to Retrieve a sample with digest [%s]", digest)
    sample = CorpusSample.find_by_digest(digest)
    if not sample:
        abort(status.HTTP_404_NOT_FOUND, f"Sample with digest '{digest}' was not found.")
    return jsonify(sample.serialize()), status.HTTP_200_OK


######################################################################
# D E L E T E   A   S A M P L E
######################################################################
@app.route("/samples/<digest>", methods=["DELETE"])
def delete_sample(digest):
    """Removes a sample from the catalog; the file itself is left alone"""
    app.logger.info("Request to Delete a sample with digest [%s]", digest)
    sample = CorpusSample.find_by_digest(digest)
    if sample:
        sample.delete()
    return "", status.HTTP_204_NO_CONTENT


######################################################################
# V A L I D A T E   P E   B Y T E S
######################################################################
@app.route("/validate", methods=["POST"])
def validate():
    """Structural validation of posted PE bytes"""
    app.logger.info("Request to validate a PE file")
    report = validate_pe(posted_image())
    return jsonify(report.serialize()), status.HTTP_200_OK


######################################################################
# E X T R A C T   F E A T U R E S
######################################################################
@app.route("/features", methods=["POST"])
def features():
    """Active feature buckets of posted PE bytes"""
    app.logger.info("Request to featurize a PE file")
    vector = extract_features(posted_image())
    return (
        jsonify(
            layout_digest=feature_layout_digest(),
            dim=len(vector),
            sections=vector.active(Space.SECTION),
            imports=vector.active(Space.IMPORT),
        ),
        status.HTTP_200_OK,
    )
