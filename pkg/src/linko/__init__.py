"""Medical concept encoder with message passing within and across ontology levels."""

__version__ = "0.1.0"
