//! Reading and writing files: panel CSVs, posterior draw archives and result
//! tables.

pub mod archive;
pub mod ingest;
pub mod results;

pub use archive::{file_hash, read_archive, read_archive_header, write_archive, ArchiveHeader};
pub use ingest::{ingest, read_points, IngestReport, RawRow, RawTable};
pub use results::{read_results, write_results, RunManifest};
