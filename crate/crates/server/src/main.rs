use workbench_server::{serve, ServerConfig};

#[tokio::main]
async fn main() {
    let config = ServerConfig::from_env();
    let server = match serve(&config).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    eprintln!("listening on ws://{}", server.local_addr());
    let _ = tokio::signal::ctrl_c().await;
    server.shutdown();
}
