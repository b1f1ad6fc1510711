# Copyright 2016, 2023 John Rofrano. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the 'License');
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an 'AS IS' BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Models for the Sample Catalog

Models
------
CorpusSample - one ingested PE file

Attributes:
-----------
digest (string) - sha256 of the file bytes, unique
label (string) - benign or malicious
path (string) - where the file was ingested from
size (int) - file size in bytes
sections (int) - number of section table entries
imports (int) - number of imported functions

"""
import logging
from flask import Flask
from flask_sqlalchemy import SQLAlchemy

logger = logging.getLogger("flask.app")

# Create the SQLAlchemy object to be initialized later in init_db()
db = SQLAlchemy()

LABELS = ("benign", "malicious")


def init_db(app):
    """Initialize the SQLAlchemy app"""
    CorpusSample.init_db(app)


class DataValidationError(Exception):
    """Used for an data validation errors when deserializing"""


class CorpusSample(db.Model):
    """
    Class that represents an ingested sample

    The harness manifest is the source of truth; the catalog mirrors it so
    the corpus can be browsed over the API
    """

    ##################################################
    # Table Schema
    ##################################################
    id = db.Column(db.Integer, primary_key=True)
    digest = db.Column(db.String(64), nullable=False, unique=True)
    label = db.Column(db.String(16), nullable=False)
    path = db.Column(db.String(1024), nullable=False)
    size = db.Column(db.Integer, nullable=False)
    sections = db.Column(db.Integer, nullable=False, default=0)
    imports = db.Column(db.Integer, nullable=False, default=0)

    ##################################################
    # INSTANCE METHODS
    ##################################################

    def __repr__(self):
        return f"<CorpusSample {self.digest[:16]} label={self.label} id=[{self.id}]>"

    def create(self):
        """
        Adds a sample to the catalog
        """
        logger.info("Creating %s", self.digest)
        # id must be none to generate next primary key
        self.id = None  # pylint: disable=invalid-name
        db.session.add(self)
        db.session.commit()

    def update(self):
        """
        Saves changes to a sample
        """
        logger.info("Saving %s", self.digest)
        if not self.id:
            raise DataValidationError("Update called with empty ID field")
        db.session.commit()

    def delete(self):
        """Removes a sample from the catalog"""
        logger.info("Deleting %s", self.digest)
        db.session.delete(self)
        db.session.commit()

    def serialize(self) -> dict:
        """Serializes a sample into a dictionary"""
        return {
            "id": self.id,
            "digest": self.digest,
            "label": self.label,
            "path": self.path,
            "size": self.size,
            "sections": self.sections,
            "imports": self.imports,
        }

    def deserialize(self, data: dict):
        """
        Deserializes a sample from a dictionary
        Args:
            data (dict): A dictionary containing the sample data
        """
        try:
            digest = data["digest"]
            if not isinstance(digest, str) or len(digest) != 64:
                raise DataValidationError("Invalid digest: expected 64 hex characters")
            int(digest, 16)
            if data["label"] not in LABELS:
                raise DataValidationError(f"Invalid label: {data['label']}")
            self.digest = digest.lower()
            self.label = data["label"]
            self.path = data["path"]
            self.size = int(data["size"])
            self.sections = int(data.get("sections", 0))
            self.imports = int(data.get("imports", 0))
        except KeyError as error:
            raise DataValidationError("Invalid sample: missing " + error.args[0]) from error
        except (TypeError, ValueError) as error:
            raise DataValidationError(
                "Invalid sample: body of request contained bad or no data " + str(error)
            ) from error
        return self

    ##################################################
    # CLASS METHODS
    ##################################################

    @classmethod
    def init_db(cls, app: Flask):
        """Initializes the database session

        :param app: the Flask app
        :type data: Flask

        """
        logger.info("Initializing database")
        if "sqlalchemy" not in app.extensions:
            db.init_app(app)
        app.app_context().push()
        db.create_all()

    @classmethod
    def all(cls) -> list:
        """Returns all of the samples in the catalog"""
        logger.info("Processing all samples")
        return cls.query.order_by(cls.digest).all()

    @classmethod
    def find(cls, sample_id: int):
        """Finds a sample by its ID"""
        logger.info("Processing lookup for id %s ...", sample_id)
        return db.session.get(cls, sample_id)

    @classmethod
    def find_by_digest(cls, digest: str):
        """Finds a sample by its digest, or a unique digest prefix

        :param digest: full sha256 or the 16 character sample id
        :type digest: str

        :return: the matching sample or None
        :rtype: CorpusSample

        """
        logger.info("Processing digest query for %s ...", digest)
        matches = cls.query.filter(cls.digest.startswith(digest.lower())).limit(2).all()
        return matches[0] if len(matches) == 1 else None

    @classmethod
    def find_by_label(cls, label: str) -> list:
        """Returns all samples with the given label"""
        logger.info("Processing label query for %s ...", label)
        return cls.query.filter(cls.label == label).order_by(cls.digest).all()

    @classmethod
    def upsert(cls, data: dict) -> "CorpusSample":
        """Creates the sample or refreshes the row with the same digest"""
        sample = cls().deserialize(data)
        existing = cls.query.filter(cls.digest == sample.digest).first()
        if existing is None:
            sample.create()
            return sample
        existing.deserialize(data)
        existing.update()
        return existing
