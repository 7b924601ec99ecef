pub mod boundary;
pub mod oracle;
