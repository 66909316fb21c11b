__version__ = "0.1.0-dev"
__authors__ = "Basile Bergeron, Mérédith Biteau, Ambre Bordas, Noé Coursimaux, Ambroise Loeb"
